import numpy as np
import pytest

from freda.config import config_from_dict
from freda.protocol import audit_transcript, run_full_protocol
from freda.protocol.engine import run_feature_models
from freda.protocol.messages import AGGREGATOR, TARGET, Message, Phase, Transcript


@pytest.fixture(scope="module")
def clean_run():
    cfg = config_from_dict({
        "master_seed": 9,
        "synthetic": {"n_source_total": 60, "n_target": 80, "n_features": 12,
                      "support_size": 5},
        "wen": {"global_rounds": 20},
    })
    return run_full_protocol(cfg)


def _rules(report):
    return {v.rule for v in report.violations}


def _msg(seq, phase, sender, receiver, kind, payload):
    return Message(seq=seq, phase=phase, sender=sender, receiver=receiver,
                   kind=kind, payload=np.asarray(payload, dtype=np.float64))


# ---------------------------------------------------------------------------
# Clean runs
# ---------------------------------------------------------------------------


def test_default_run_audits_clean(clean_run):
    report = audit_transcript(clean_run.transcript)
    assert report.clean, report.to_text()
    assert report.stats["messages"] == len(clean_run.transcript)
    assert report.stats["aggregator_matrices"] > 0
    assert report.stats["masked_width_min"] == report.stats["configured_d"]


def test_clean_run_masked_widths_exceed_feature_count(clean_run):
    report = audit_transcript(clean_run.transcript)
    assert report.stats["masked_width_min"] > report.stats["feature_count"]


def test_clean_run_with_unmatched_sentinels(clean_run):
    # magic values that exist nowhere in the data: still clean
    report = audit_transcript(clean_run.transcript,
                              sentinels=[123456.789, -98765.4321])
    assert report.clean


def test_feature_model_transcript_audits_clean():
    rng = np.random.default_rng(0)
    shards = [rng.normal(size=(8, 5)) for _ in range(2)]
    target = rng.normal(size=(4, 5))
    _, _, transcript = run_feature_models(shards, target, np.array([1.0, 1.0]),
                                          master_seed=2)
    report = audit_transcript(transcript, expected_d=10, expected_p=5)
    assert report.clean, report.to_text()


def test_raw_plaintext_never_crosses_the_wire(clean_run):
    """Treat every raw source value as a sentinel: standardization and
    masking mean none of them may appear verbatim in any payload."""
    from freda.protocol.engine import load_run_data

    cfg = config_from_dict({
        "master_seed": 9,
        "synthetic": {"n_source_total": 60, "n_target": 80, "n_features": 12,
                      "support_size": 5},
        "wen": {"global_rounds": 20},
    })
    shards, _, _ = load_run_data(cfg)
    sentinels = shards[0].features[:3].ravel()
    report = audit_transcript(clean_run.transcript, sentinels=sentinels)
    assert report.clean, report.to_text()


# ---------------------------------------------------------------------------
# Violations
# ---------------------------------------------------------------------------


def test_sentinel_injection_detected(clean_run):
    tampered = Transcript(meta=dict(clean_run.transcript.meta))
    tampered.messages = list(clean_run.transcript.messages)
    sentinel = 777.125  # exactly representable, planted nowhere else
    leak = _msg(len(tampered) + 100, Phase.SETUP, 0, AGGREGATOR,
                "stats-share", [sentinel, 0.0])
    tampered.append(leak)
    report = audit_transcript(tampered, sentinels=[sentinel])
    assert not report.clean
    assert _rules(report) == {"sentinel"}
    assert str(sentinel) in report.violations[0].detail


def test_unknown_kind_flagged():
    tr = Transcript()
    tr.append(_msg(0, Phase.SETUP, 0, AGGREGATOR, "exfiltrate", [1.0]))
    assert "unknown-kind" in _rules(audit_transcript(tr))


def test_wrong_phase_flagged():
    tr = Transcript()
    tr.append(_msg(0, Phase.SETUP, TARGET, AGGREGATOR, "weights", [0.5]))
    assert "wrong-phase" in _rules(audit_transcript(tr))


def test_bad_sender_and_receiver_flagged():
    tr = Transcript()
    # weights must come from the target, and never reach another source
    tr.append(_msg(0, Phase.WEIGHTS, 0, AGGREGATOR, "weights", [0.5]))
    tr.append(_msg(1, Phase.WEIGHTS, TARGET, 1, "weights", [0.5]))
    rules = _rules(audit_transcript(tr))
    assert {"bad-sender", "bad-receiver"} <= rules


def test_seed_to_aggregator_flagged():
    tr = Transcript()
    tr.append(_msg(0, Phase.SETUP, 0, AGGREGATOR, "mask-seed", [5.0, 9.0]))
    assert "seed-to-aggregator" in _rules(audit_transcript(tr))


def test_duplicate_and_regressing_sequence_flagged():
    tr = Transcript()
    tr.append(_msg(4, Phase.SETUP, 0, AGGREGATOR, "stats-share", [1.0]))
    tr.append(_msg(4, Phase.SETUP, 0, AGGREGATOR, "stats-share", [1.0]))
    tr.append(_msg(2, Phase.SETUP, 0, AGGREGATOR, "stats-share", [1.0]))
    rules = _rules(audit_transcript(tr))
    assert {"duplicate-seq", "seq-order"} <= rules


def test_plain_matrix_to_aggregator_flagged():
    tr = Transcript()
    tr.append(_msg(0, Phase.FEATURE_MODELS, 0, AGGREGATOR, "hp-share",
                   np.ones((3, 2))))
    assert "plain-matrix-to-aggregator" in _rules(audit_transcript(tr))


def test_underwidth_masked_block_flagged():
    tr = Transcript()
    # lifted width must exceed the feature count
    tr.append(_msg(0, Phase.FEATURE_MODELS, 0, AGGREGATOR, "masked-block#0",
                   np.ones((4, 5))))
    report = audit_transcript(tr, expected_d=10, expected_p=5)
    assert {"masked-width", "unmasked-width"} <= _rules(report)


def test_target_leak_during_feature_modeling_flagged():
    tr = Transcript()
    tr.append(_msg(0, Phase.FEATURE_MODELS, AGGREGATOR, TARGET, "lambda-grid",
                   [1.0, 0.5]))
    rules = _rules(audit_transcript(tr))
    assert "target-leak" in rules
    assert "wrong-phase" in rules


def test_digest_only_transcript_skips_value_scan_with_note(tmp_path, clean_run):
    path = tmp_path / "lean.jsonl"
    clean_run.transcript.write_jsonl(path, inline_payloads=False)
    back = Transcript.read_jsonl(path)
    report = audit_transcript(back, sentinels=[42.0])
    assert report.clean
    assert any("sentinel scan skipped" in n for n in report.notes)


def test_report_text_shape(clean_run):
    clean = audit_transcript(clean_run.transcript)
    assert clean.to_text().startswith("audit: clean")
    tr = Transcript()
    tr.append(_msg(0, Phase.SETUP, 0, AGGREGATOR, "exfiltrate", [1.0]))
    dirty = audit_transcript(tr)
    text = dirty.to_text()
    assert "VIOLATIONS FOUND" in text
    assert "unknown-kind" in text
