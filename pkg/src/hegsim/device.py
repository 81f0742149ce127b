"""The guarantee processor: workload admission, receipt emission, cumulative
counters, the sharing log, controlled deployment, private evaluations, and
tamper handling.

One processor mediates one simulated accelerator. Every admitted workload
becomes a signed receipt in the device's local view of the provenance graph;
denied requests change nothing but the clock. A model is identified by the
origin receipts of its ancestor graph, and the per-lineage FLOP counters are
kept equal to the ancestor-set totals at all times.

Declared FLOP counts are trusted here because the simulated accelerator is
honest; measuring them is the hardware's problem, not this state machine's.
Tamper events have no remote trigger path by design - they arrive only as
direct calls from the scenario script.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Mapping

from .encoding import blob, digest, kv_map, seq, text, u64
from .errors import (
    Denied,
    MissingSafeguardTag,
    Tampered,
    UnapprovedRecipient,
    UnknownModel,
    UnknownParent,
)
from .identity import (
    Attestation,
    DeviceIdentity,
    LifeState,
    SealedBlob,
    open_sealed,
    seal_to,
    sign,
    verify_attestation,
    wipe,
)
from .policy import (
    DEFAULT_UPDATE_INTERVAL_MS,
    Decision,
    License,
    QuorumConfig,
    Ruleset,
    UpdatePackage,
    commit_binding,
    evaluate_rules,
    expire_tick,
    install_update,
    remove_commitment,
)
from .receipts import (
    EXTERNAL,
    Claim,
    Receipt,
    ReceiptDag,
    decode_receipt,
    emit_receipt,
    encode_receipt,
    sharing_claim,
    total_flop,
    training_flop,
)

if TYPE_CHECKING:  # pragma: no cover - typing only
    from .netsim import ClusterConfig

_WORKLOAD_DOMAIN = b"hegsim/workload/v1:"
_EVAL_DOMAIN = b"hegsim/eval-result/v1:"
_DEPLOY_DOMAIN = b"hegsim/deploy/v1:"

MODEL_PAYLOAD_LEN = 256


@dataclass(frozen=True)
class WorkloadRequest:
    """What the accelerator asks permission to run."""

    op_class: str
    parents: tuple[bytes, ...] = ()
    declared_flop: int = 0
    data_in: tuple[tuple[bytes, int], ...] = ()
    tags: frozenset[str] = frozenset()
    destination: bytes | str | None = None

    def __post_init__(self):
        if self.declared_flop < 0:
            raise ValueError("declared_flop must be non-negative")

    def digest(self) -> bytes:
        """Identity of the workload *template* for whitelists and licenses.

        Parents are positional and deliberately excluded: a whitelisted
        workload is "this computation on these inputs with these tags",
        wherever it sits in the graph.
        """
        return digest(
            _WORKLOAD_DOMAIN
            + text(self.op_class)
            + u64(self.declared_flop)
            + seq(blob(d) + u64(n) for d, n in sorted(self.data_in))
            + seq(text(t) for t in sorted(self.tags))
        )


@dataclass(frozen=True)
class SharingLogEntry:
    """One outbound transfer of a result. The log is append-only."""

    result: bytes
    recipient: bytes | str      # device id, or "external"
    at: int
    sealed: bool


@dataclass(frozen=True)
class EvalResult:
    """Outcome of a private evaluation: score and digests, nothing else."""

    model: bytes
    suite_digest: bytes
    score: int
    attestation: Attestation

    def body(self) -> bytes:
        return (
            _EVAL_DOMAIN
            + blob(self.model)
            + blob(self.suite_digest)
            + u64(self.score)
        )


def encode_eval_result(result: EvalResult) -> bytes:
    att = result.attestation
    return (
        result.body()
        + blob(att.signer)
        + u64(att.issued_at)
        + blob(att.signature)
    )


def verify_eval_result(result: EvalResult, public_key: bytes) -> bool:
    att = result.attestation
    if att.payload != result.body():
        return False
    return verify_attestation(att, public_key)


def model_payload(model_id: bytes) -> bytes:
    """Stand-in weight bytes for a trained result.

    Deterministic pseudo-random stream keyed by the receipt id; real weights
    never exist in this simulator, but these bytes are what must never
    appear unsealed on the wire.
    """
    out = b""
    counter = 0
    while len(out) < MODEL_PAYLOAD_LEN:
        out += digest(b"hegsim/model-bytes:" + model_id + u64(counter))
        counter += 1
    return out[:MODEL_PAYLOAD_LEN]


def encode_deployment(model: Receipt) -> bytes:
    """The plaintext package a controlled deployment seals per recipient."""
    return (
        _DEPLOY_DOMAIN
        + blob(encode_receipt(model))
        + blob(model_payload(model.receipt_id))
    )


class GuaranteeProcessor:
    """Per-device state machine. One logical thread per device; all
    cross-device interaction happens by value through the network."""

    def __init__(
        self,
        identity: DeviceIdentity,
        active_ruleset: Ruleset | None,
        baseline_ruleset: Ruleset | None = None,
        quorum: QuorumConfig | None = None,
        update_interval_ms: int = DEFAULT_UPDATE_INTERVAL_MS,
        authority_keys: Mapping[bytes, bytes] | None = None,
        now: int = 0,
    ) -> None:
        self.identity = identity
        self.active_ruleset = active_ruleset
        self.baseline_ruleset = baseline_ruleset
        self.ruleset_version = active_ruleset.version if active_ruleset else 0
        self.quorum = quorum
        self.update_interval_ms = update_interval_ms
        self.update_deadline = now + update_interval_ms
        self.licenses: list[License] = []
        self.authority_keys: dict[bytes, bytes] = dict(authority_keys or {})
        self.dag_view = ReceiptDag()
        self.sharing_log: list[SharingLogEntry] = []
        self.flop_counters: dict[bytes, int] = {}
        self.eval_ledger: dict[bytes, int] = {}
        self.binding = None
        self.tampered = False
        self.location_restricted = False
        self.cluster: "ClusterConfig | None" = None
        self.cluster_claim: Claim | None = None
        self.import_origins: dict[bytes, str] = {}
        self.clock = now

    # -- plumbing --

    def _check_operational(self, now: int) -> None:
        self.clock = max(self.clock, now)
        if self.tampered:
            raise Tampered("tamper response has fired; device is dead")
        self.identity.require_active()

    def effective_ruleset(self, now: int) -> Ruleset | None:
        expire_tick(self, now)
        if self.location_restricted:
            return self.baseline_ruleset
        return self.active_ruleset

    def grant_license(self, lic: License) -> None:
        self.licenses.append(lic)

    def trust_authority(self, device_id: bytes, public_key: bytes) -> None:
        self.authority_keys[device_id] = public_key

    def import_receipt(self, receipt: Receipt, origin: str) -> None:
        """Adopt a receipt produced elsewhere (cluster sync or sealed
        transfer). Missing ancestry becomes bare declared roots."""
        self.dag_view.add(receipt, declare_missing_parents=True)
        if receipt.producer != self.identity.device_id:
            self.import_origins[receipt.receipt_id] = origin

    # -- the admission path --

    def handle_workload(self, request: WorkloadRequest, now: int) -> Receipt:
        """Admit or refuse one workload step.

        The expiry tick runs first, rule evaluation is pure, and a denial
        leaves the state untouched except for the clock.
        """
        self._check_operational(now)
        ruleset = self.effective_ruleset(now)
        decision = evaluate_rules(ruleset, request, self, now)
        if not decision.allowed:
            raise Denied(decision.rule_id, decision.reason)
        for parent in request.parents:
            if parent not in self.dag_view.receipts and parent not in self.dag_view.roots:
                raise UnknownParent(f"unknown parent {parent.hex()[:12]}")
        receipt = emit_receipt(
            self.dag_view,
            self.identity,
            request.op_class,
            parents=request.parents,
            flop=request.declared_flop,
            data_in=request.data_in,
            tags=request.tags,
            interval=(now, now),
        )
        self._update_counters(receipt)
        if request.destination is not None:
            self.sharing_log.append(
                SharingLogEntry(
                    result=receipt.parents[0] if receipt.parents else receipt.receipt_id,
                    recipient=request.destination,
                    at=now,
                    sealed=isinstance(request.destination, bytes),
                )
            )
        return receipt

    def log_idle(self, start: int, end: int, rate_flop_per_s: int) -> Receipt:
        """Record an explicit idle receipt covering [start, end] at the
        device's rated capacity, so accounting stays a pure sum."""
        self._check_operational(end)
        if start > end:
            raise ValueError("idle interval start after end")
        return emit_receipt(
            self.dag_view,
            self.identity,
            "idle",
            flop=rate_flop_per_s * (end - start) // 1000,
            tags=("idle",),
            interval=(start, end),
        )

    def _update_counters(self, receipt: Receipt) -> None:
        total = total_flop(self.dag_view, receipt.receipt_id)
        for root in self.dag_view.roots_of(receipt.receipt_id):
            self.flop_counters[root] = total

    # -- policy operations (delegate to the policy module) --

    def install_update(self, update: UpdatePackage, now: int) -> None:
        self._check_operational(now)
        if self.quorum is None:
            raise Denied("no_quorum", "device has no update quorum configured")
        install_update(self, update, self.quorum, now)

    def commit_binding(
        self, ruleset: Ruleset, irrevocable_until: int, owner: DeviceIdentity, now: int
    ) -> Claim:
        self._check_operational(now)
        return commit_binding(self, ruleset, irrevocable_until, owner, now)

    def remove_commitment(self, now: int) -> None:
        self._check_operational(now)
        remove_commitment(self, now)

    # -- deployment and evaluation --

    def controlled_deploy(
        self,
        model: bytes,
        approved: Iterable[bytes],
        tags: Iterable[str],
        directory: Mapping[bytes, bytes],
        now: int,
    ) -> tuple[dict[bytes, SealedBlob], list[Receipt], Claim]:
        """Release a trained result to approved devices only, sealed per
        recipient, and attest the resulting recipient set.

        The model bytes never leave the device unsealed; the transfer
        receipts carry the deployment-time safeguard tags.
        """
        self._check_operational(now)
        if model not in self.dag_view.receipts:
            raise UnknownModel(f"no local receipt {model.hex()[:12]}")
        approved = tuple(dict.fromkeys(approved))
        tags = frozenset(tags)
        ruleset = self.effective_ruleset(now)

        # Validate every recipient before anything leaves the device, so a
        # refused deployment changes no state at all.
        keys: dict[bytes, bytes] = {}
        for recipient in approved:
            request = WorkloadRequest(
                op_class="transfer",
                parents=(model,),
                tags=tags,
                destination=recipient,
            )
            decision = evaluate_rules(ruleset, request, self, now)
            if not decision.allowed:
                raise self._deployment_error(decision)
            key = directory.get(recipient)
            if key is None:
                raise UnapprovedRecipient(
                    f"no public key for recipient {recipient.hex()[:12]}"
                )
            keys[recipient] = key

        package = encode_deployment(self.dag_view.get(model))
        blobs: dict[bytes, SealedBlob] = {}
        receipts: list[Receipt] = []
        for recipient in approved:
            blobs[recipient] = seal_to(keys[recipient], package, self.identity, now)
            receipts.append(
                emit_receipt(
                    self.dag_view,
                    self.identity,
                    "transfer",
                    parents=(model,),
                    tags=tags,
                    interval=(now, now),
                )
            )
            self.sharing_log.append(
                SharingLogEntry(result=model, recipient=recipient, at=now, sealed=True)
            )
        claim = sharing_claim(self.sharing_log, model, self.identity, now)
        return blobs, receipts, claim

    @staticmethod
    def _deployment_error(decision: Decision) -> Exception:
        if decision.rule_id == "controlled_deployment":
            if "safeguard" in decision.reason:
                return MissingSafeguardTag(decision.reason)
            return UnapprovedRecipient(decision.reason)
        if decision.rule_id == "share_only_to":
            return UnapprovedRecipient(decision.reason)
        return Denied(decision.rule_id, decision.reason)

    def receive_deployment(self, blob_in: SealedBlob, now: int) -> Receipt:
        """Open a deployment sealed to this device and adopt the model
        receipt into the local graph."""
        self._check_operational(now)
        package = open_sealed(blob_in, self.identity)
        receipt = decode_deployment(package)
        self.import_receipt(receipt, origin="transfer")
        return receipt

    def run_private_eval(
        self,
        model: bytes,
        sealed_suite: SealedBlob,
        evaluator_public_key: bytes,
        now: int,
        declared_flop: int = 0,
    ) -> tuple[EvalResult, SealedBlob]:
        """Run a sealed evaluation suite against a local model.

        The suite stays inside the device; the evaluator gets back only the
        score and the digests of what was scored, sealed to their key. The
        evaluation receipt resets the training-interval ledger for the
        model's lineage.
        """
        self._check_operational(now)
        if model not in self.dag_view.receipts:
            raise UnknownModel(f"no local receipt {model.hex()[:12]}")
        suite_bytes = open_sealed(sealed_suite, self.identity)
        suite = json.loads(suite_bytes.decode("utf-8"))
        score = int(suite.get("scores", {}).get(model.hex(), suite.get("default", 0)))

        emit_receipt(
            self.dag_view,
            self.identity,
            "evaluation",
            parents=(model,),
            flop=declared_flop,
            tags=("evaluation",),
            interval=(now, now),
        )
        trained = training_flop(self.dag_view, model)
        for root in self.dag_view.roots_of(model):
            self.eval_ledger[root] = trained

        suite_digest = digest(suite_bytes)
        body = _EVAL_DOMAIN + blob(model) + blob(suite_digest) + u64(score)
        result = EvalResult(
            model=model,
            suite_digest=suite_digest,
            score=score,
            attestation=sign(self.identity, body, now),
        )
        sealed_result = seal_to(
            evaluator_public_key, encode_eval_result(result), self.identity, now
        )
        return result, sealed_result

    # -- tamper response --

    def tamper_event(self, brick: bool = False) -> None:
        """Enclosure intrusion: wipe secrets (optionally brick) and refuse
        everything from here on. Previously emitted receipts remain
        verifiable against the surviving public key."""
        wipe(self.identity, brick=brick)
        self.tampered = True

    # -- introspection for tests and reports --

    def state_digest(self) -> bytes:
        """Digest of everything but the clock, for deny-means-unchanged
        checks."""
        parts = [
            self.identity.device_id,
            self.identity.life_state.value.encode(),
            self.active_ruleset.ruleset_id if self.active_ruleset else b"-",
            self.baseline_ruleset.ruleset_id if self.baseline_ruleset else b"-",
            u64(self.ruleset_version),
            u64(self.update_deadline),
            u64(len(self.licenses)),
            seq(blob(lic.license_id()) for lic in self.licenses),
            seq(blob(r) for r in sorted(self.dag_view.receipts)),
            seq(blob(r) for r in sorted(self.dag_view.roots)),
            seq(
                blob(e.result)
                + (blob(e.recipient) if isinstance(e.recipient, bytes) else text(e.recipient))
                + u64(e.at)
                for e in self.sharing_log
            ),
            kv_map((k.hex(), v) for k, v in self.flop_counters.items()),
            kv_map((k.hex(), v) for k, v in self.eval_ledger.items()),
            u64(1 if self.tampered else 0),
            u64(1 if self.location_restricted else 0),
            blob(self.binding.body()) if self.binding else b"-",
        ]
        return digest(b"\x00".join(parts))


def decode_deployment(package: bytes) -> Receipt:
    """Reconstruct the model receipt from a deployment package."""
    from .encoding import read_blob

    if package[: len(_DEPLOY_DOMAIN)] != _DEPLOY_DOMAIN:
        raise ValueError("not a deployment package")
    off = len(_DEPLOY_DOMAIN)
    encoded_receipt, off = read_blob(package, off)
    _, off = read_blob(package, off)  # model payload
    if off != len(package):
        raise ValueError("trailing bytes in deployment package")
    return decode_receipt(encoded_receipt)
