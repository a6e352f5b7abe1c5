"""The four-phase adaptation protocol over message-passing parties.

One engine object drives an aggregator, N source clients, and one
target client through:

* phase 0: seed setup and federated standardization,
* phase 1: per-feature hyper-parameter averaging and masked
  Gaussian-process feature models,
* phase 2: target-side confidence scores and penalty weights,
* phase 3: per-grid-point federated elastic-net training on the
  label-available target domains and similarity-based penalty
  prediction for the evaluation domains,
* phase 4: final federated models and target-side evaluation.

The engine is a single conductor thread that calls party objects in a
fixed order; every inter-party value moves through the transport, so
the transcript is a complete, auditable record of what each party saw.
Per-feature work in phase 1 can run on worker threads; staged replay
commits the messages in feature order, keeping transcripts
byte-identical to the sequential schedule.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .. import privacy, wen
from ..datamodel import (
    AgeTransformParams,
    Dataset,
    FeatureStats,
    age_transform,
    age_transform_inverse,
    gen_synthetic,
    local_stats,
    read_dataset_csv,
    standardize_columns,
)
from ..errors import FactorizationError, ProtocolError
from ..gpr import GprHyperParams, OptimBounds, mean_operator, optimize_hyperparams
from ..seeds import derive_seed
from .messages import AGGREGATOR, TARGET, Phase, Transcript, array_to_seed, seed_to_array
from .transport import MemoryTransport, SocketTransport, StagingTransport
from .weights import DomainWeights, compute_domain_weights

logger = logging.getLogger(__name__)

__all__ = [
    "SimilarityModel",
    "DomainMetrics",
    "RunResult",
    "fit_similarity_model",
    "select_lambda",
    "run_feature_models",
    "run_full_protocol",
    "load_run_data",
]

VARIANCE_DROP_TOL = 1e-12


# ---------------------------------------------------------------------------
# Penalty prediction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimilarityModel:
    """Line fit mapping domain similarity to a penalty level.

    Fits log-penalty by default (penalty grids are geometric); the fit
    degenerates to a constant when fewer than two points are available,
    which is recorded rather than hidden.
    """

    slope: float
    intercept: float
    log_space: bool
    points: tuple
    residuals: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.slope) and math.isfinite(self.intercept)):
            raise ValueError("similarity fit produced non-finite coefficients")

    def predict_lambda(self, similarity: float) -> float:
        value = self.slope * float(similarity) + self.intercept
        if self.log_space:
            return float(math.exp(value))
        return float(max(value, 1e-12))


def fit_similarity_model(
    similarities: Sequence[float],
    lambdas: Sequence[float],
    log_space: bool = True,
) -> SimilarityModel:
    """Least-squares line through (similarity, penalty) pairs."""
    sims = np.asarray(list(similarities), dtype=np.float64)
    lams = np.asarray(list(lambdas), dtype=np.float64)
    if sims.shape != lams.shape or sims.ndim != 1 or sims.size == 0:
        raise ValueError("need matching nonempty similarity and penalty vectors")
    if np.any(lams <= 0):
        raise ValueError("penalties must be positive")
    targets = np.log(lams) if log_space else lams
    if sims.size < 2 or np.ptp(sims) == 0:
        logger.warning("similarity fit degenerate (%d point(s)); using the mean", sims.size)
        slope, intercept, degenerate = 0.0, float(targets.mean()), True
    else:
        design = np.column_stack([sims, np.ones_like(sims)])
        (slope, intercept), *_ = np.linalg.lstsq(design, targets, rcond=None)
        degenerate = False
    residuals = (slope * sims + intercept) - targets
    return SimilarityModel(
        slope=float(slope),
        intercept=float(intercept),
        log_space=log_space,
        points=tuple(zip(sims.tolist(), lams.tolist())),
        residuals=residuals,
        degenerate=degenerate,
    )


def select_lambda(grid_values: np.ndarray, maes: Sequence[float]):
    """Index and value of the error-minimizing penalty; ties take the
    larger penalty."""
    grid_values = np.asarray(grid_values, dtype=np.float64)
    maes = list(maes)
    if grid_values.shape != (len(maes),):
        raise ValueError("one error per grid value required")
    order = np.argsort(-grid_values, kind="stable")  # large penalty first
    best = None
    best_mae = math.inf
    for idx in order:
        if maes[idx] < best_mae:
            best_mae = maes[idx]
            best = int(idx)
    return best, float(grid_values[best])


# ---------------------------------------------------------------------------
# Party state
# ---------------------------------------------------------------------------


class _Source:
    def __init__(self, pid: int, features_raw: np.ndarray, labels_raw: Optional[np.ndarray]):
        self.pid = pid
        self.x_raw = np.asarray(features_raw, dtype=np.float64)
        self.y_raw = None if labels_raw is None else np.asarray(labels_raw, dtype=np.float64)
        self.secret = None
        self.mask_seed = None
        self.pair_seeds = {}
        self.x = None
        self.y = None
        self.weights = {}
        self.grids = {}
        self.lambdas = {}

    @property
    def n(self) -> int:
        return self.x_raw.shape[0]

    def instance_mask(self, instance: int, shape) -> np.ndarray:
        seeds = {
            peer: derive_seed(seed, "agg", instance) for peer, seed in self.pair_seeds.items()
        }
        return privacy.party_mask(self.pid, seeds, shape)


class _Target:
    def __init__(self, features_raw, ages, domain_ids, similarities):
        self.pid = TARGET
        self.x_raw = np.asarray(features_raw, dtype=np.float64)
        self.ages = None if ages is None else np.asarray(ages, dtype=np.float64)
        self.domain_ids = (
            np.zeros(self.x_raw.shape[0], dtype=np.int64)
            if domain_ids is None
            else np.asarray(domain_ids, dtype=np.int64)
        )
        self.similarities = dict(similarities or {})
        self.mask_seed = None
        self.x = None
        self.label_mean = 0.0
        self.label_sd = 1.0
        self.feature_means = None
        self.feature_vars = None
        self.weights = {}
        self.grids = {}
        self.notes = []


class _Aggregator:
    def __init__(self):
        self.pid = AGGREGATOR
        self.stats = None
        self.label_stats = None
        self.dropped = []
        self.hp = None
        self.weights = {}
        self.grid_scores = None
        self.lambdas = {}


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DomainMetrics:
    domain_id: int
    n_samples: int
    lambda_used: float
    mae_freda: float
    mae_enls: float


@dataclass
class RunResult:
    """Everything a run produces: per-domain metrics, models, trace."""

    metrics: list
    models: dict
    transcript: Transcript
    feature_means: np.ndarray
    feature_vars: np.ndarray
    weights: dict
    similarity_model: Optional[SimilarityModel]
    lambda_opt: dict
    hp: np.ndarray
    dropped_columns: list
    config_digest: str
    master_seed: int
    notes: list = field(default_factory=list)

    def metrics_csv(self) -> str:
        lines = [
            f"# config_digest={self.config_digest}",
            f"# master_seed={self.master_seed}",
            f"# transcript_sha256={self.transcript.digest()}",
            "domain_id,n_samples,lambda_used,mae_freda,mae_enls",
        ]
        for m in self.metrics:
            lines.append(
                f"{m.domain_id},{m.n_samples},{m.lambda_used!r},"
                f"{m.mae_freda!r},{m.mae_enls!r}"
            )
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(self.metrics_csv().encode())
        h.update(self.transcript.digest().encode())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------


class _Engine:
    """Conductor driving all parties through the protocol phases."""

    def __init__(
        self,
        *,
        shards: Sequence[tuple],
        target_features: np.ndarray,
        target_ages: Optional[np.ndarray],
        target_domains: Optional[np.ndarray],
        similarities: Optional[dict],
        transport,
        master_seed: int,
        k: float = 3.0,
        alpha: float = 0.8,
        flake_d: int = 0,
        wen_rounds: int = 100,
        wen_epochs: int = 20,
        eta0: float = 1e-4,
        eta_final: float = 1e-5,
        grid_size: int = 20,
        grid_ratio: float = 1e-4,
        gpr_bounds: OptimBounds = OptimBounds(),
        hp_init: GprHyperParams = GprHyperParams(1.0, 1.0),
        hp_sample_weighted: bool = False,
        lambda_fit_log: bool = True,
        age_adult: float = 20.0,
        engine_mode: str = "reference",
        apply_standardization: bool = True,
        fixed_hp: Optional[np.ndarray] = None,
    ):
        if engine_mode not in ("reference", "parallel"):
            raise ValueError(f"unknown engine mode {engine_mode!r}")
        self.sources = [_Source(i, x, y) for i, (x, y) in enumerate(shards)]
        self.target = _Target(target_features, target_ages, target_domains, similarities)
        self.agg = _Aggregator()
        self.transport = transport
        self.master_seed = master_seed
        self.k = float(k)
        self.alpha = float(alpha)
        self.flake_d = int(flake_d)
        self.wen_rounds = wen_rounds
        self.wen_epochs = wen_epochs
        self.eta0 = eta0
        self.eta_final = eta_final
        self.grid_size = grid_size
        self.grid_ratio = grid_ratio
        self.gpr_bounds = gpr_bounds
        self.hp_init = hp_init
        self.hp_sample_weighted = hp_sample_weighted
        self.lambda_fit_log = lambda_fit_log
        self.age_params = AgeTransformParams(age_adult)
        self.engine_mode = engine_mode
        self.apply_standardization = apply_standardization
        self.fixed_hp = fixed_hp
        self._instance = 0
        self.p_eff = self.sources[0].x_raw.shape[1]
        self.similarity_model = None
        self.lambda_opt = {}
        self.lambda_pred = {}
        self.final_models = {}
        self.domain_maes = {}
        self.notes = []

    # -- plumbing ---------------------------------------------------------

    @property
    def n_clients(self) -> int:
        return len(self.sources)

    @property
    def n_t(self) -> int:
        return self.target.x_raw.shape[0]

    @property
    def counts(self):
        return [s.x.shape[0] for s in self.sources]

    def _send(self, phase, sender, receiver, kind, payload):
        return self.transport.send(phase, sender, receiver, kind, payload)

    def _recv(self, receiver):
        return self.transport.recv(receiver)

    def _next_instance(self) -> int:
        self._instance += 1
        return self._instance

    def _run_phase(self, phase: Phase, fn, *args):
        try:
            return fn(*args)
        except ProtocolError:
            raise
        except Exception as exc:
            raise ProtocolError(phase.name, str(exc)) from exc

    # -- phase 0: setup and standardization -------------------------------

    def _setup_seeds(self):
        ph = Phase.SETUP
        for src in self.sources:
            src.secret = derive_seed(self.master_seed, "party", src.pid)
        flake = derive_seed(self.sources[0].secret, "flake")
        self.sources[0].mask_seed = flake
        payload = seed_to_array(flake)
        for src in self.sources[1:]:
            self._send(ph, 0, src.pid, "mask-seed", payload)
            src.mask_seed = array_to_seed(self._recv(src.pid).payload)
        self._send(ph, 0, TARGET, "mask-seed", payload)
        self.target.mask_seed = array_to_seed(self._recv(TARGET).payload)
        for i, src in enumerate(self.sources):
            for peer in self.sources[i + 1 :]:
                seed = derive_seed(src.secret, "pair", peer.pid)
                src.pair_seeds[peer.pid] = seed
                self._send(ph, src.pid, peer.pid, "pair-seed", seed_to_array(seed))
                peer.pair_seeds[src.pid] = array_to_seed(self._recv(peer.pid).payload)

    def _secure_sum_rounds(self, phase, kind, vectors):
        """One masked aggregation: every source ships its share, the
        aggregator returns the sum of what it received."""
        inst = self._next_instance()
        for src, vec in zip(self.sources, vectors):
            share = np.asarray(vec, dtype=np.float64)
            share = share + src.instance_mask(inst, share.shape)
            self._send(phase, src.pid, AGGREGATOR, kind, share)
        payloads = [self._recv(AGGREGATOR).payload for _ in self.sources]
        return privacy.secure_sum(payloads)

    def _broadcast(self, phase, kind, payload, to_target=True):
        for src in self.sources:
            self._send(phase, AGGREGATOR, src.pid, kind, payload)
        if to_target:
            self._send(phase, AGGREGATOR, TARGET, kind, payload)
        received = {}
        for src in self.sources:
            received[src.pid] = self._recv(src.pid).payload
        if to_target:
            received[TARGET] = self._recv(TARGET).payload
        return received

    def _phase0(self):
        self._setup_seeds()
        if not self.apply_standardization:
            for src in self.sources:
                src.x = src.x_raw
                src.y = src.y_raw
            self.target.x = self.target.x_raw
            return

        ph = Phase.SETUP
        packs = [local_stats(src.x_raw).pack() for src in self.sources]
        pooled = FeatureStats.unpack(self._secure_sum_rounds(ph, "stats-share", packs))
        self.agg.stats = pooled

        label_packs = []
        for src in self.sources:
            z = age_transform(src.y_raw, self.age_params)
            label_packs.append(local_stats(z[:, None]).pack())
        pooled_labels = FeatureStats.unpack(
            self._secure_sum_rounds(ph, "label-stats-share", label_packs)
        )
        self.agg.label_stats = pooled_labels
        if pooled_labels.variance()[0] <= VARIANCE_DROP_TOL:
            raise ValueError("pooled labels have zero variance")

        dropped = np.flatnonzero(pooled.variance() <= VARIANCE_DROP_TOL)
        self.agg.dropped = dropped.tolist()
        drops = self._broadcast(ph, "drop-columns", dropped.astype(np.float64))
        stats_rx = self._broadcast(ph, "pooled-stats", pooled.pack())
        labels_rx = self._broadcast(ph, "pooled-label-stats", pooled_labels.pack())

        keep = [j for j in range(self.p_eff) if j not in set(self.agg.dropped)]
        self.p_eff = len(keep)
        if self.p_eff < 2:
            raise ValueError("fewer than 2 usable feature columns after drops")

        def kept_stats(pack):
            full = FeatureStats.unpack(pack)
            return FeatureStats(full.count, full.sum[keep], full.sum_sq[keep])

        for src in self.sources:
            drop_list = drops[src.pid].astype(np.int64).tolist()
            stats = kept_stats(stats_rx[src.pid])
            lstats = FeatureStats.unpack(labels_rx[src.pid])
            src.x = standardize_columns(src.x_raw[:, keep], stats)
            z = age_transform(src.y_raw, self.age_params)
            src.y = (z - lstats.mean()[0]) / lstats.sd()[0]
            assert drop_list == self.agg.dropped
        t_stats = kept_stats(stats_rx[TARGET])
        t_lstats = FeatureStats.unpack(labels_rx[TARGET])
        self.target.x = standardize_columns(self.target.x_raw[:, keep], t_stats)
        self.target.label_mean = float(t_lstats.mean()[0])
        self.target.label_sd = float(t_lstats.sd()[0])

    # -- phase 1: hyper-parameters and feature models ----------------------

    def _phase1(self):
        ph = Phase.FEATURE_MODELS
        p = self.p_eff
        if self.fixed_hp is not None:
            hp = np.asarray(self.fixed_hp, dtype=np.float64)
            if hp.shape == (2,):
                hp = np.tile(hp, (p, 1))
            if hp.shape != (p, 2):
                raise ValueError("fixed hyper-parameters must be (P, 2)")
            self.agg.hp = hp
        else:
            n_total = sum(self.counts)
            shares = []
            for src in self.sources:
                hp_mat = np.empty((p, 2))
                for f in range(p):
                    x_minus = np.delete(src.x, f, axis=1)
                    y_f = src.x[:, f]
                    try:
                        opt = optimize_hyperparams(x_minus, y_f, self.gpr_bounds, self.hp_init)
                    except FactorizationError:
                        opt = self.hp_init
                        self._send(ph, src.pid, AGGREGATOR, "hp-fallback", [float(f)])
                        self._recv(AGGREGATOR)
                    hp_mat[f] = (opt.sigma_p2, opt.sigma_n2)
                scale = (
                    src.n * self.n_clients / n_total if self.hp_sample_weighted else 1.0
                )
                shares.append((hp_mat * scale).ravel())
            total = self._secure_sum_rounds(ph, "hp-share", shares)
            self.agg.hp = (total / self.n_clients).reshape(p, 2)

        d = self.flake_d if self.flake_d else 2 * p
        if d <= p - 1:
            raise ValueError(f"lifted dimension {d} must exceed {p - 1}")
        self._flake_dim = d

        if self.engine_mode == "parallel":
            stages = [StagingTransport() for _ in range(p)]
            with ThreadPoolExecutor(max_workers=min(8, p)) as pool:
                results = list(
                    pool.map(lambda f: self._feature_task(f, stages[f], d), range(p))
                )
            for stage in stages:
                stage.replay_onto(self.transport)
        else:
            results = [self._feature_task(f, self.transport, d) for f in range(p)]

        means = np.column_stack([r[0] for r in results])
        variances = np.column_stack([r[1] for r in results])
        negative = int(np.count_nonzero(variances < 0))
        if negative:
            note = f"clamped {negative} negative posterior variance cell(s) to zero"
            self.target.notes.append(note)
            self.notes.append(note)
            logger.warning("%s", note)
        self.target.feature_means = means
        self.target.feature_vars = np.maximum(variances, 0.0)

    def _feature_task(self, f: int, tp, d: int):
        """Masked posterior of feature f's model at the target points."""
        ph = Phase.FEATURE_MODELS
        mask_seed = self.target.mask_seed  # shared by every data holder
        basis = privacy.gen_mask_basis(derive_seed(mask_seed, "feature", f), self.p_eff - 1, d)
        l_inv = privacy.left_inverse(basis)
        s_root = privacy.psd_sqrt(basis.m @ basis.m.T)

        for src in self.sources:
            lifted = privacy.mask_data(np.delete(src.x, f, axis=1), l_inv, s_root, src.pid)
            tp.send(ph, src.pid, AGGREGATOR, f"masked-block#{f}", lifted.rows)
        lifted_t = privacy.mask_data(np.delete(self.target.x, f, axis=1), l_inv, s_root, TARGET)
        tp.send(ph, TARGET, AGGREGATOR, f"masked-block#{f}", lifted_t.rows)

        parts = []
        for _ in range(self.n_clients + 1):
            msg = tp.recv(AGGREGATOR)
            parts.append(privacy.MaskedMatrix(rows=msg.payload, owner=msg.sender))
        blocks = privacy.gram_from_masked(parts)
        g_ss, g_st, g_tt = blocks.views([s.pid for s in self.sources], TARGET)
        hp_f = GprHyperParams(float(self.agg.hp[f, 0]), float(self.agg.hp[f, 1]))
        op = mean_operator(g_ss, g_st, hp_f)
        k_star = hp_f.sigma_p2 * g_st.T
        variance = hp_f.sigma_p2 * np.diagonal(g_tt) - np.einsum("ij,ij->i", op, k_star)
        enc = privacy.gen_encoding_mask(
            derive_seed(self.master_seed, "aggregator", "encoding", f), self.n_t
        )
        masked_op = enc.c @ op
        for src, block in zip(self.sources, privacy.split_columns(masked_op, self.counts)):
            tp.send(ph, AGGREGATOR, src.pid, f"mean-operator-block#{f}", block)
        tp.send(ph, AGGREGATOR, TARGET, f"encoding-inverse#{f}", enc.c_inv)
        tp.send(ph, AGGREGATOR, TARGET, f"variance#{f}", variance)

        for src in self.sources:
            block = tp.recv(src.pid).payload
            tp.send(ph, src.pid, TARGET, f"mean-share#{f}", block @ src.x[:, f])

        c_inv = tp.recv(TARGET).payload
        variance_rx = tp.recv(TARGET).payload
        acc = None
        for _ in self.sources:
            share = tp.recv(TARGET).payload
            acc = share.copy() if acc is None else acc + share
        mean = c_inv @ acc
        return mean, variance_rx

    # -- phase 2: weights ---------------------------------------------------

    def _phase2(self):
        ph = Phase.WEIGHTS
        per_domain = compute_domain_weights(
            self.target.x,
            self.target.domain_ids,
            self.target.feature_means,
            self.target.feature_vars,
            self.k,
        )
        self.target.weights = per_domain
        for dm in sorted(per_domain):
            w = per_domain[dm].weights
            self._send(ph, TARGET, AGGREGATOR, f"weights#{dm}", w)
            self.agg.weights[dm] = self._recv(AGGREGATOR).payload
            for src in self.sources:
                self._send(ph, AGGREGATOR, src.pid, f"weights-broadcast#{dm}", w)
                src.weights[dm] = self._recv(src.pid).payload

    # -- phases 3 and 4: penalty search and final training ------------------

    def _federated_wen(self, phase: Phase, tag: str, lam: float, weights_vec: np.ndarray):
        cfg = wen.WenConfig(
            weights=weights_vec,
            lam=float(lam),
            alpha=self.alpha,
            global_rounds=self.wen_rounds,
            local_epochs=self.wen_epochs,
            eta0=self.eta0,
            eta_final=self.eta_final,
        )
        zero = np.zeros(self.p_eff)
        for src in self.sources:
            self._send(phase, AGGREGATOR, src.pid, f"model#{tag}", zero)
        for src in self.sources:
            self._recv(src.pid)

        def hook(contributions):
            inst = self._next_instance()
            for src, contrib in zip(self.sources, contributions):
                share = contrib + src.instance_mask(inst, contrib.shape)
                self._send(phase, src.pid, AGGREGATOR, f"model-share#{tag}", share)
            payloads = [self._recv(AGGREGATOR).payload for _ in self.sources]
            total = privacy.secure_sum(payloads)
            for src in self.sources:
                self._send(phase, AGGREGATOR, src.pid, f"model#{tag}", total)
            latest = total
            for src in self.sources:
                latest = self._recv(src.pid).payload
            return latest

        shards = [(src.x, src.y) for src in self.sources]
        return wen.train_federated_wen(shards, cfg, hook)

    def _target_mae(self, beta: np.ndarray, rows: np.ndarray) -> float:
        pred_std = self.target.x[rows] @ beta
        years = age_transform_inverse(
            pred_std * self.target.label_sd + self.target.label_mean, self.age_params
        )
        return wen.mae(years, self.target.ages[rows])

    def _phase3(self, t1: Sequence[int], t2: Sequence[int]):
        ph = Phase.LAMBDA_SEARCH
        scores = [2.0 * (src.x.T @ src.y) for src in self.sources]
        self.agg.grid_scores = self._secure_sum_rounds(ph, "grid-share", scores)

        lambda_opt = {}
        for dm in t1:
            w = self.agg.weights[dm]
            grid = wen.lambda_grid_from_scores(
                self.agg.grid_scores, w, self.alpha, self.grid_size, self.grid_ratio
            )
            rx = self._broadcast(ph, f"lambda-grid#{dm}", grid.values)
            for src in self.sources:
                src.grids[dm] = rx[src.pid]
            self.target.grids[dm] = rx[TARGET]

            betas = []
            for gi, lam in enumerate(grid.values):
                model = self._federated_wen(ph, f"{dm}.{gi}", lam, w)
                self._send(ph, AGGREGATOR, TARGET, f"grid-model#{dm}.{gi}", model.beta)
                betas.append(self._recv(TARGET).payload)

            rows = self.target.domain_ids == dm
            maes = [self._target_mae(beta, rows) for beta in betas]
            _, lam_best = select_lambda(self.target.grids[dm], maes)
            lambda_opt[dm] = lam_best
            logger.info("domain %d: selected penalty %.6g", dm, lam_best)

        self.lambda_opt = lambda_opt
        sims = [self.target.similarities[dm] for dm in t1]
        self.similarity_model = fit_similarity_model(
            sims, [lambda_opt[dm] for dm in t1], log_space=self.lambda_fit_log
        )
        for dm in t2:
            lam = self.similarity_model.predict_lambda(self.target.similarities[dm])
            self.lambda_pred[dm] = lam
            self._send(ph, TARGET, AGGREGATOR, f"lambda-pred#{dm}", [lam])
            self.agg.lambdas[dm] = float(self._recv(AGGREGATOR).payload[0])
            for src in self.sources:
                self._send(ph, AGGREGATOR, src.pid, f"lambda-broadcast#{dm}", [lam])
                src.lambdas[dm] = float(self._recv(src.pid).payload[0])

    def _phase4(self, t2: Sequence[int]):
        ph = Phase.FINAL_TRAINING
        for dm in t2:
            lam = self.sources[0].lambdas[dm]
            w = self.sources[0].weights[dm]
            model = self._federated_wen(ph, f"final.{dm}", lam, w)
            self._send(ph, AGGREGATOR, TARGET, f"final-model#{dm}", model.beta)
            beta = self._recv(TARGET).payload
            rows = self.target.domain_ids == dm
            mae_years = self._target_mae(beta, rows)
            self.final_models[dm] = wen.WenModel(beta)
            self.domain_maes[dm] = mae_years
            self._send(
                Phase.RESULTS,
                TARGET,
                AGGREGATOR,
                f"metrics#{dm}",
                [float(dm), float(rows.sum()), lam, mae_years],
            )
            self._recv(AGGREGATOR)

    # -- orchestration -------------------------------------------------------

    def run_feature_phases(self):
        self._run_phase(Phase.SETUP, self._phase0)
        self._run_phase(Phase.FEATURE_MODELS, self._phase1)

    def run(self, t1: Sequence[int], t2: Sequence[int]):
        self.run_feature_phases()
        self._run_phase(Phase.WEIGHTS, self._phase2)
        self._run_phase(Phase.LAMBDA_SEARCH, self._phase3, t1, t2)
        self._run_phase(Phase.FINAL_TRAINING, self._phase4, t2)


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------


def _make_transport(name: str, n_clients: int):
    if name == "memory":
        return MemoryTransport()
    if name == "socket":
        return SocketTransport(list(range(n_clients)) + [AGGREGATOR, TARGET])
    raise ValueError(f"unknown transport {name!r}")


def run_feature_models(
    shards_x: Sequence[np.ndarray],
    target_x: np.ndarray,
    hp: np.ndarray,
    *,
    flake_d: int = 0,
    master_seed: int = 0,
    transport=None,
    engine_mode: str = "reference",
):
    """Run only the masked feature-model pipeline on prepared data.

    ``hp`` is either one (sigma_p2, sigma_n2) pair or a (P, 2) array of
    per-feature pairs; inputs are used as-is (no standardization).
    Returns (means, variances, transcript) where the arrays are
    n_t x P, matching the target client's view.
    """
    owned = transport is None
    transport = transport or _make_transport("memory", len(shards_x))
    engine = _Engine(
        shards=[(x, None) for x in shards_x],
        target_features=target_x,
        target_ages=None,
        target_domains=None,
        similarities={},
        transport=transport,
        master_seed=master_seed,
        flake_d=flake_d,
        engine_mode=engine_mode,
        apply_standardization=False,
        fixed_hp=np.asarray(hp, dtype=np.float64),
    )
    try:
        engine.run_feature_phases()
    finally:
        if owned:
            transport.close()
    return engine.target.feature_means, engine.target.feature_vars, transport.transcript


def load_run_data(config):
    """Materialize (shards, target dataset, similarity map) per config."""
    if config.mode == "synthetic":
        syn = replace(
            config.synthetic,
            seed=derive_seed(config.master_seed, "data"),
            n_clients=config.n_source_clients,
        )
        shards, target, sims = gen_synthetic(syn)
        similarity = {dm: float(s) for dm, s in enumerate(sims)}
        return shards, target, similarity
    if config.mode == "files":
        if config.paths is None:
            raise ValueError("files mode requires a [paths] table")
        shards = [read_dataset_csv(p) for p in config.paths.source_shards]
        target = read_dataset_csv(config.paths.target)
        similarity = {}
        import csv as _csv

        with open(config.paths.similarities, newline="") as fh:
            for row in _csv.DictReader(fh):
                similarity[int(row["domain_id"])] = float(row["similarity"])
        return shards, target, similarity
    raise ValueError(f"unknown mode {config.mode!r}")


def _resolve_splits(config, domains, counts):
    split = config.split
    if not split.sweep:
        t1, t2 = list(split.t1), list(split.t2)
        for dm in t1 + t2:
            if dm not in domains:
                raise ValueError(f"split references unknown domain {dm}")
        if set(t1) & set(t2):
            raise ValueError("t1 and t2 domains must be disjoint")
        if not t1 or not t2:
            raise ValueError("both t1 and t2 must be nonempty")
        return [(t1, t2)]
    from itertools import combinations

    eligible = [dm for dm in sorted(domains) if counts[dm] >= split.min_samples]
    if len(eligible) <= split.sweep_t1_size:
        raise ValueError("not enough eligible domains to sweep")
    out = []
    for combo in combinations(eligible, split.sweep_t1_size):
        t1 = list(combo)
        t2 = [dm for dm in sorted(domains) if dm not in combo]
        out.append((t1, t2))
    return out


def run_full_protocol(config, transport=None) -> RunResult:
    """Execute every phase per the run configuration and evaluate.

    Returns metrics per evaluation domain including the non-adaptive
    baseline (cross-validated elastic net plus least-squares refit,
    trained on the pooled source data outside the protocol).
    """
    shards, target_ds, similarity = load_run_data(config)
    domains = sorted(set(int(d) for d in target_ds.domain_ids))
    domain_counts = {dm: int(np.sum(target_ds.domain_ids == dm)) for dm in domains}
    splits = _resolve_splits(config, domains, domain_counts)

    owned = transport is None
    transport = transport or _make_transport(config.transport, config.n_source_clients)
    engine = _Engine(
        shards=[(s.features, s.labels) for s in shards],
        target_features=target_ds.features,
        target_ages=target_ds.labels,
        target_domains=target_ds.domain_ids,
        similarities=similarity,
        transport=transport,
        master_seed=config.master_seed,
        k=config.k,
        alpha=config.alpha,
        flake_d=config.flake_d,
        wen_rounds=config.wen.global_rounds,
        wen_epochs=config.wen.local_epochs,
        eta0=config.wen.eta0,
        eta_final=config.wen.eta_final,
        grid_size=config.wen.grid_size,
        grid_ratio=config.wen.grid_ratio,
        gpr_bounds=OptimBounds(
            (math.log(config.gpr.sigma_lo), math.log(config.gpr.sigma_hi)),
            (math.log(config.gpr.sigma_lo), math.log(config.gpr.sigma_hi)),
            config.gpr.max_evals,
        ),
        hp_init=GprHyperParams(config.gpr.init_sigma_p2, config.gpr.init_sigma_n2),
        hp_sample_weighted=config.gpr.sample_weighted,
        lambda_fit_log=config.lambda_fit == "log",
        age_adult=config.age_adult,
        engine_mode=config.engine_mode,
    )
    transport.transcript.meta = {
        "master_seed": config.master_seed,
        "config_digest": config.digest(),
        "n_clients": config.n_source_clients,
    }
    try:
        engine.run_feature_phases()
        engine._run_phase(Phase.WEIGHTS, engine._phase2)
        all_metrics = []
        for t1, t2 in splits:
            engine._run_phase(Phase.LAMBDA_SEARCH, engine._phase3, t1, t2)
            engine._run_phase(Phase.FINAL_TRAINING, engine._phase4, t2)
            all_metrics.extend(
                (dm, engine.lambda_pred[dm], engine.domain_maes[dm]) for dm in t2
            )
    finally:
        if owned:
            transport.close()
    transport.transcript.meta["p"] = engine.p_eff
    transport.transcript.meta["d"] = engine._flake_dim

    baseline_maes = _baseline_maes(
        config, engine, shards, target_ds, [dm for dm, _, _ in all_metrics]
    )
    metrics = [
        DomainMetrics(
            domain_id=dm,
            n_samples=domain_counts[dm],
            lambda_used=lam,
            mae_freda=mae_freda,
            mae_enls=baseline_maes[dm],
        )
        for dm, lam, mae_freda in all_metrics
    ]
    return RunResult(
        metrics=metrics,
        models=dict(engine.final_models),
        transcript=transport.transcript,
        feature_means=engine.target.feature_means,
        feature_vars=engine.target.feature_vars,
        weights=dict(engine.target.weights),
        similarity_model=engine.similarity_model,
        lambda_opt=dict(engine.lambda_opt),
        hp=engine.agg.hp,
        dropped_columns=list(engine.agg.dropped),
        config_digest=config.digest(),
        master_seed=config.master_seed,
        notes=list(engine.notes),
    )


def _baseline_maes(config, engine, shards, target_ds, eval_domains):
    """Non-adaptive baseline trained on pooled plaintext source data."""
    age_params = AgeTransformParams(config.age_adult)
    x_pool = np.concatenate([s.features for s in shards], axis=0)
    y_pool = np.concatenate([s.labels for s in shards])
    keep = [j for j in range(x_pool.shape[1]) if j not in set(engine.agg.dropped)]
    x_pool = x_pool[:, keep]
    stats = local_stats(x_pool)
    x_std = standardize_columns(x_pool, stats)
    z = age_transform(y_pool, age_params)
    z_stats = local_stats(z[:, None])
    z_std = (z - z_stats.mean()[0]) / z_stats.sd()[0]
    model = wen.en_ls_baseline(
        x_std,
        z_std,
        alpha=config.alpha,
        folds=min(10, x_std.shape[0]),
        seed=derive_seed(config.master_seed, "baseline-folds"),
    )
    x_t = standardize_columns(target_ds.features[:, keep], stats)
    out = {}
    for dm in sorted(set(eval_domains)):
        rows = target_ds.domain_ids == dm
        pred = x_t[rows] @ model.beta
        years = age_transform_inverse(
            pred * z_stats.sd()[0] + z_stats.mean()[0], age_params
        )
        out[dm] = wen.mae(years, target_ds.labels[rows])
    return out
