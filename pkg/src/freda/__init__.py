"""Privacy-preserving federated domain adaptation for regression.

Source clients hold labeled shards, a target client holds unlabeled
(or selection-labeled) data from shifted domains, and an aggregator
coordinates without ever seeing plaintext rows.  Per-feature
Gaussian-process models trained through masked Gram computation score
how badly each feature's dependency structure broke on the target;
those scores weight a federated elastic net so that broken features
are penalized harder.
"""

from .config import RunConfig, load_config
from .errors import (
    ConfigError,
    FactorizationError,
    FredaError,
    ProtocolError,
    ZeroVarianceError,
)
from .oracle import OracleResult, run_oracle
from .protocol import (
    AGGREGATOR,
    TARGET,
    AuditReport,
    MemoryTransport,
    Message,
    Phase,
    RunResult,
    SocketTransport,
    Transcript,
    audit_transcript,
    run_full_protocol,
)

__version__ = "0.1.0"

__all__ = [
    "AGGREGATOR",
    "TARGET",
    "AuditReport",
    "ConfigError",
    "FactorizationError",
    "FredaError",
    "MemoryTransport",
    "Message",
    "OracleResult",
    "Phase",
    "ProtocolError",
    "RunConfig",
    "RunResult",
    "SocketTransport",
    "Transcript",
    "ZeroVarianceError",
    "audit_transcript",
    "load_config",
    "run_full_protocol",
    "run_oracle",
    "__version__",
]
