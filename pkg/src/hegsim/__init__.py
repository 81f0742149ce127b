"""hegsim: a deterministic, desk-scale simulator for hardware-enforced
compute governance.

Simulated accelerator devices carry a guarantee processor that signs
workload receipts, aggregates them into minimal-disclosure claims, enforces
updateable rulesets and cryptographic licenses, responds to tamper events,
and verifies location and cluster configuration over a simulated network.
"""

from . import errors
from .device import EvalResult, GuaranteeProcessor, SharingLogEntry, WorkloadRequest
from .identity import (
    Attestation,
    DeviceIdentity,
    LifeState,
    SealedBlob,
    generate_identity,
    open_sealed,
    seal_to,
    sign,
    verify_attestation,
    wipe,
)
from .netsim import (
    ClusterConfig,
    LocationClaim,
    NetworkModel,
    form_cluster,
    measure_rtt,
    verify_cluster_constraints,
    verify_location,
)
from .policy import (
    BindingCommitment,
    License,
    QuorumConfig,
    Rule,
    Ruleset,
    UpdatePackage,
    check_license,
    evaluate_rules,
    make_license,
    make_ruleset,
    make_update,
)
from .receipts import (
    Claim,
    Receipt,
    ReceiptDag,
    claim_flop_below,
    compute_accounting,
    emit_receipt,
    query_tags,
    sharing_claim,
    total_data,
    total_flop,
    verify_claim,
)

__version__ = "0.1.0"

__all__ = [
    "Attestation",
    "BindingCommitment",
    "Claim",
    "ClusterConfig",
    "DeviceIdentity",
    "EvalResult",
    "GuaranteeProcessor",
    "License",
    "LifeState",
    "LocationClaim",
    "NetworkModel",
    "QuorumConfig",
    "Receipt",
    "ReceiptDag",
    "Rule",
    "Ruleset",
    "SealedBlob",
    "SharingLogEntry",
    "UpdatePackage",
    "WorkloadRequest",
    "check_license",
    "claim_flop_below",
    "compute_accounting",
    "emit_receipt",
    "errors",
    "evaluate_rules",
    "form_cluster",
    "generate_identity",
    "make_license",
    "make_ruleset",
    "make_update",
    "measure_rtt",
    "open_sealed",
    "query_tags",
    "seal_to",
    "sharing_claim",
    "sign",
    "total_data",
    "total_flop",
    "verify_attestation",
    "verify_claim",
    "verify_cluster_constraints",
    "verify_location",
    "wipe",
]
