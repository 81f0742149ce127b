"""Rulesets and their evaluation, quorum-signed updates, operating licenses,
binding commitments, and the issuer transparency log.

Rule evaluation is deny-overrides: a request is allowed only if every rule
passes, and a denial names the first violated rule in declared order. The
one exception is an explicit workload whitelist, which admits a matching
request outright - whitelisted workloads are the "irrevocably allowed" tier
that survives license and ruleset expiry.

A baseline ruleset is the restrictive fallback a device reverts to when its
update deadline or ruleset expiry passes. It admits only whitelisted
workloads and, when the device holds a current verified small-cluster
attestation within the baseline's egress bound, generic workloads on that
cluster.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Iterable, Mapping

from .encoding import NEVER, blob, digest, seq, text, u64
from .errors import (
    BadSignature,
    ClaimRefused,
    CommitmentActive,
    InsufficientQuorum,
    InvalidExpiry,
    LogGap,
    RulesetExpired,
    UnknownDevice,
    VersionRollback,
)
from .identity import (
    Attestation,
    DeviceIdentity,
    sign,
    verify_attestation,
)
from .receipts import Claim, issue_claim

if TYPE_CHECKING:  # pragma: no cover - typing only
    from .device import GuaranteeProcessor, WorkloadRequest

RULE_KINDS = frozenset({
    "max_training_flop",
    "require_license",
    "share_only_to",
    "require_eval_every",
    "controlled_deployment",
    "max_cluster_egress",
    "allow_whitelisted",
})

GOVERNED_ONLY = "governed_only"

# Default forced-update interval: 90 simulated days, in milliseconds.
DEFAULT_UPDATE_INTERVAL_MS = 90 * 24 * 3600 * 1000

_RULESET_DOMAIN = b"hegsim/ruleset/v1:"
_LICENSE_DOMAIN = b"hegsim/license/v1:"
_COMMIT_DOMAIN = b"hegsim/commitment/v1:"

WILDCARD = "*"


@dataclass(frozen=True)
class Rule:
    """One policy rule. Which optional fields are meaningful depends on
    `kind`; use the factory functions below rather than constructing
    directly."""

    kind: str
    rule_id: str
    limit: int = 0
    action_class: str = ""
    share_mode: str = ""
    device_set: frozenset[bytes] = frozenset()
    min_flop: int = 0
    required_tags: frozenset[str] = frozenset()
    digests: frozenset[bytes] = frozenset()

    def encode(self) -> bytes:
        return (
            text(self.kind)
            + text(self.rule_id)
            + u64(self.limit)
            + text(self.action_class)
            + text(self.share_mode)
            + seq(blob(d) for d in sorted(self.device_set))
            + u64(self.min_flop)
            + seq(text(t) for t in sorted(self.required_tags))
            + seq(blob(d) for d in sorted(self.digests))
        )


def max_training_flop(limit: int, rule_id: str = "max_training_flop") -> Rule:
    if limit < 0:
        raise ValueError("limit must be non-negative")
    return Rule(kind="max_training_flop", rule_id=rule_id, limit=limit)


def require_license(action_class: str, rule_id: str = "require_license") -> Rule:
    return Rule(kind="require_license", rule_id=rule_id, action_class=action_class)


def share_only_to(
    allowed: Iterable[bytes] | str, rule_id: str = "share_only_to"
) -> Rule:
    """Restrict transfer destinations, either to the governed ecosystem
    (`GOVERNED_ONLY`) or to an explicit device set."""
    if allowed == GOVERNED_ONLY:
        return Rule(kind="share_only_to", rule_id=rule_id, share_mode=GOVERNED_ONLY)
    devices = frozenset(allowed)
    if not devices:
        raise ValueError("explicit share set must be non-empty")
    return Rule(
        kind="share_only_to", rule_id=rule_id, share_mode="explicit",
        device_set=devices,
    )


def require_eval_every(flop_interval: int, rule_id: str = "require_eval_every") -> Rule:
    if flop_interval <= 0:
        raise ValueError("evaluation interval must be positive")
    return Rule(kind="require_eval_every", rule_id=rule_id, limit=flop_interval)


def controlled_deployment(
    min_flop: int,
    approved: Iterable[bytes],
    required_tags: Iterable[str],
    rule_id: str = "controlled_deployment",
) -> Rule:
    approved = frozenset(approved)
    if not approved:
        raise ValueError("approved device set must be non-empty")
    return Rule(
        kind="controlled_deployment",
        rule_id=rule_id,
        min_flop=min_flop,
        device_set=approved,
        required_tags=frozenset(required_tags),
    )


def max_cluster_egress(bytes_per_s: int, rule_id: str = "max_cluster_egress") -> Rule:
    if bytes_per_s < 0:
        raise ValueError("egress cap must be non-negative")
    return Rule(kind="max_cluster_egress", rule_id=rule_id, limit=bytes_per_s)


def allow_whitelisted(
    workload_digests: Iterable[bytes], rule_id: str = "allow_whitelisted"
) -> Rule:
    return Rule(
        kind="allow_whitelisted", rule_id=rule_id,
        digests=frozenset(workload_digests),
    )


@dataclass(frozen=True)
class Ruleset:
    ruleset_id: bytes
    version: int
    rules: tuple[Rule, ...]
    expiry: int | None
    issuer_signatures: tuple[Attestation, ...] = ()
    baseline: bool = False

    def body(self) -> bytes:
        return ruleset_body(self.version, self.rules, self.expiry, self.baseline)

    def expired(self, now: int) -> bool:
        if self.baseline or self.expiry is None:
            return False
        return now >= self.expiry


def ruleset_body(
    version: int, rules: Iterable[Rule], expiry: int | None, baseline: bool
) -> bytes:
    return (
        u64(version)
        + u64(NEVER if expiry is None else expiry)
        + u64(1 if baseline else 0)
        + seq(r.encode() for r in rules)
    )


def make_ruleset(
    version: int,
    rules: Iterable[Rule],
    expiry: int | None = None,
    baseline: bool = False,
    issuer_signatures: Iterable[Attestation] = (),
) -> Ruleset:
    rules = tuple(rules)
    body = ruleset_body(version, rules, expiry, baseline)
    return Ruleset(
        ruleset_id=digest(_RULESET_DOMAIN + body),
        version=version,
        rules=rules,
        expiry=expiry,
        issuer_signatures=tuple(issuer_signatures),
        baseline=baseline,
    )


@dataclass(frozen=True)
class QuorumConfig:
    """N-of-M authority keys that may replace a device's ruleset."""

    signer_keys: tuple[bytes, ...]
    threshold: int

    def __post_init__(self):
        if not 1 <= self.threshold <= len(self.signer_keys):
            raise ValueError(
                f"threshold {self.threshold} out of range for "
                f"{len(self.signer_keys)} signer keys"
            )

    def key_for(self, signer_id: bytes) -> bytes | None:
        for key in self.signer_keys:
            if digest(key) == signer_id:
                return key
        return None


@dataclass(frozen=True)
class UpdatePackage:
    new_ruleset: Ruleset
    signatures: tuple[Attestation, ...]

    @property
    def version(self) -> int:
        return self.new_ruleset.version


def sign_ruleset(ruleset: Ruleset, signer: DeviceIdentity, now: int = 0) -> Attestation:
    return sign(signer, _RULESET_DOMAIN + ruleset.body(), now)


def make_update(
    ruleset: Ruleset, signers: Iterable[DeviceIdentity], now: int = 0
) -> UpdatePackage:
    return UpdatePackage(
        new_ruleset=ruleset,
        signatures=tuple(sign_ruleset(ruleset, s, now) for s in signers),
    )


@dataclass(frozen=True)
class License:
    """Time-limited cryptographic authorization for an action class or a
    specific workload digest. Non-renewal is the only off-switch."""

    issuers: tuple[bytes, ...]
    scope: str | bytes          # action class, WILDCARD, or workload digest
    subject: bytes | str        # device id or WILDCARD
    not_before: int
    not_after: int
    threshold: int
    signatures: tuple[Attestation, ...] = ()

    def body(self) -> bytes:
        scope = (
            b"d" + blob(self.scope)
            if isinstance(self.scope, bytes)
            else b"c" + text(self.scope)
        )
        subject = (
            b"d" + blob(self.subject)
            if isinstance(self.subject, bytes)
            else b"c" + text(self.subject)
        )
        return (
            seq(blob(i) for i in self.issuers)
            + scope
            + subject
            + u64(self.not_before)
            + u64(self.not_after)
            + u64(self.threshold)
        )

    def license_id(self) -> bytes:
        return digest(_LICENSE_DOMAIN + self.body())


def make_license(
    issuers: Iterable[DeviceIdentity],
    scope: str | bytes,
    subject: bytes | str,
    not_before: int,
    not_after: int,
    threshold: int,
    signers: Iterable[DeviceIdentity] | None = None,
    now: int = 0,
) -> License:
    """Build and sign a license. `signers` defaults to all issuers."""
    issuers = tuple(issuers)
    if not_before >= not_after:
        raise InvalidExpiry("license validity window is empty")
    unsigned = License(
        issuers=tuple(i.device_id for i in issuers),
        scope=scope,
        subject=subject,
        not_before=not_before,
        not_after=not_after,
        threshold=threshold,
    )
    message = _LICENSE_DOMAIN + unsigned.body()
    signing = issuers if signers is None else tuple(signers)
    return replace(
        unsigned,
        signatures=tuple(sign(s, message, now) for s in signing),
    )


def license_quorum_ok(lic: License, key_lookup: Mapping[bytes, bytes]) -> bool:
    """Count distinct valid issuer signatures against the threshold."""
    message = _LICENSE_DOMAIN + lic.body()
    valid: set[bytes] = set()
    for att in lic.signatures:
        if att.signer not in lic.issuers:
            continue
        key = key_lookup.get(att.signer)
        if key is None:
            continue
        if att.payload == message and verify_attestation(att, key):
            valid.add(att.signer)
    return len(valid) >= lic.threshold


def license_covers(
    lic: License,
    action_class: str,
    workload_digest: bytes,
    device_id: bytes,
    now: int,
    key_lookup: Mapping[bytes, bytes],
) -> bool:
    if not (lic.not_before <= now < lic.not_after):
        return False
    if lic.subject != WILDCARD and lic.subject != device_id:
        return False
    if isinstance(lic.scope, bytes):
        if lic.scope != workload_digest:
            return False
    elif lic.scope not in (WILDCARD, action_class):
        return False
    return license_quorum_ok(lic, key_lookup)


def check_license(
    licenses: Iterable[License],
    action_class: str,
    workload_digest: bytes,
    device_id: bytes,
    now: int,
    key_lookup: Mapping[bytes, bytes],
) -> bool:
    """True iff some installed license covers the action right now.

    Validity windows are half-open [not_before, not_after): a license is
    live at not_after - 1 and dead at not_after.
    """
    return any(
        license_covers(lic, action_class, workload_digest, device_id, now, key_lookup)
        for lic in licenses
    )


@dataclass(frozen=True)
class BindingCommitment:
    """An owner-installed ruleset that nothing can remove before expiry."""

    ruleset_id: bytes
    owner: bytes
    committed_at: int
    irrevocable_until: int
    attestation: Attestation

    def body(self) -> bytes:
        return commitment_body(
            self.ruleset_id, self.owner, self.committed_at, self.irrevocable_until
        )


def commitment_body(
    ruleset_id: bytes, owner: bytes, committed_at: int, irrevocable_until: int
) -> bytes:
    return (
        _COMMIT_DOMAIN
        + blob(ruleset_id)
        + blob(owner)
        + u64(committed_at)
        + u64(irrevocable_until)
    )


@dataclass
class Decision:
    """Outcome of rule evaluation: allow, or deny naming the violated rule."""

    allowed: bool
    rule_id: str = ""
    reason: str = ""

    @classmethod
    def allow(cls) -> "Decision":
        return cls(allowed=True)

    @classmethod
    def deny(cls, rule_id: str, reason: str) -> "Decision":
        return cls(allowed=False, rule_id=rule_id, reason=reason)


def _prospective_totals(state: "GuaranteeProcessor", request) -> tuple[int, int]:
    """(total FLOP, training FLOP) the result of `request` would carry."""
    dag = state.dag_view
    seen: set[bytes] = set()
    stack = list(request.parents)
    total = 0
    training = 0
    while stack:
        rid = stack.pop()
        if rid in seen:
            continue
        seen.add(rid)
        receipt = dag.receipts.get(rid)
        if receipt is None:
            continue
        total += receipt.flop
        if receipt.op_class == "training_step":
            training += receipt.flop
        stack.extend(p for p in receipt.parents if p not in seen)
    total += request.declared_flop
    if request.op_class == "training_step":
        training += request.declared_flop
    return total, training


def _lineage_roots(state: "GuaranteeProcessor", request) -> frozenset[bytes]:
    dag = state.dag_view
    roots: set[bytes] = set()
    for parent in request.parents:
        if parent in dag.receipts:
            roots |= dag.roots_of(parent)
        elif parent in dag.roots:
            roots.add(parent)
    return frozenset(roots)


def _small_cluster_allowance(state: "GuaranteeProcessor", cap: int, now: int) -> bool:
    """Baseline allowance: the device sits in a currently valid verified
    cluster whose certified egress stays within the baseline's cap."""
    cluster = getattr(state, "cluster", None)
    claim = getattr(state, "cluster_claim", None)
    if cluster is None or claim is None:
        return False
    if not cluster.valid_at(now):
        return False
    return cluster.egress_cap <= cap


def evaluate_rules(
    ruleset: Ruleset | None,
    request: "WorkloadRequest",
    state: "GuaranteeProcessor",
    now: int,
) -> Decision:
    """Pure evaluation of `request` against `ruleset`.

    Raises RulesetExpired when handed a stale non-baseline ruleset; callers
    normally run the expiry tick first so this only fires on direct misuse.
    """
    if ruleset is None:
        return Decision.deny("no_ruleset", "no active ruleset; device blocked")
    if ruleset.expired(now):
        raise RulesetExpired(f"ruleset v{ruleset.version} expired")

    request_digest = request.digest()
    whitelisted = any(
        rule.kind == "allow_whitelisted" and request_digest in rule.digests
        for rule in ruleset.rules
    )
    if whitelisted:
        return Decision.allow()

    if ruleset.baseline:
        for rule in ruleset.rules:
            if rule.kind == "max_cluster_egress" and _small_cluster_allowance(
                state, rule.limit, now
            ):
                return Decision.allow()
        return Decision.deny(
            "baseline",
            "baseline ruleset admits only whitelisted workloads or verified small clusters",
        )

    total, training_total = _prospective_totals(state, request)

    for rule in ruleset.rules:
        if rule.kind == "allow_whitelisted":
            continue

        if rule.kind == "max_training_flop":
            if request.op_class == "training_step" and total > rule.limit:
                return Decision.deny(
                    rule.rule_id,
                    f"training run would reach {total} FLOP, over the "
                    f"{rule.limit} FLOP limit",
                )

        elif rule.kind == "require_license":
            applies = rule.action_class in (WILDCARD, request.op_class)
            if applies and not check_license(
                state.licenses,
                request.op_class,
                request_digest,
                state.identity.device_id,
                now,
                state.authority_keys,
            ):
                return Decision.deny(
                    rule.rule_id,
                    f"no valid license for {request.op_class!r} at t={now}",
                )

        elif rule.kind == "share_only_to":
            destination = request.destination
            if destination is not None:
                if rule.share_mode == GOVERNED_ONLY:
                    if not isinstance(destination, bytes):
                        return Decision.deny(
                            rule.rule_id,
                            "results may only be sent to governed devices",
                        )
                elif (
                    not isinstance(destination, bytes)
                    or destination not in rule.device_set
                ):
                    return Decision.deny(
                        rule.rule_id,
                        "destination outside the allowed share set",
                    )

        elif rule.kind == "require_eval_every":
            if request.op_class == "training_step":
                roots = _lineage_roots(state, request)
                floor = min(
                    (state.eval_ledger.get(r, 0) for r in roots), default=0
                )
                if training_total - floor > rule.limit:
                    return Decision.deny(
                        rule.rule_id,
                        f"{training_total - floor} training FLOP since last "
                        f"evaluation exceeds the {rule.limit} FLOP interval",
                    )

        elif rule.kind == "controlled_deployment":
            if request.op_class == "transfer" and total >= rule.min_flop:
                destination = request.destination
                if (
                    not isinstance(destination, bytes)
                    or destination not in rule.device_set
                ):
                    return Decision.deny(
                        rule.rule_id,
                        "deployment target is not an approved device",
                    )
                missing = rule.required_tags - request.tags
                if missing:
                    return Decision.deny(
                        rule.rule_id,
                        f"deployment lacks required safeguard tags: "
                        f"{sorted(missing)}",
                    )

        elif rule.kind == "max_cluster_egress":
            cluster = getattr(state, "cluster", None)
            if cluster is not None and cluster.egress_cap > rule.limit:
                return Decision.deny(
                    rule.rule_id,
                    f"cluster egress cap {cluster.egress_cap} exceeds "
                    f"{rule.limit}",
                )

    return Decision.allow()


def install_update(
    state: "GuaranteeProcessor",
    update: UpdatePackage,
    quorum: QuorumConfig,
    now: int,
) -> "GuaranteeProcessor":
    """Apply a quorum-signed ruleset update and reset the update deadline.

    Signatures from keys outside the quorum are ignored; a signature that
    names a quorum key but fails verification is treated as tampering.
    Duplicate signatures from one key count once.
    """
    if state.binding is not None and now < state.binding.irrevocable_until:
        raise CommitmentActive(
            "a binding commitment forbids ruleset replacement until "
            f"t={state.binding.irrevocable_until}"
        )
    message = _RULESET_DOMAIN + update.new_ruleset.body()
    valid: set[bytes] = set()
    for att in update.signatures:
        key = quorum.key_for(att.signer)
        if key is None:
            continue
        if att.payload != message or not verify_attestation(att, key):
            raise BadSignature(
                f"update signature from {att.signer.hex()[:12]} does not verify"
            )
        valid.add(att.signer)
    if len(valid) < quorum.threshold:
        raise InsufficientQuorum(
            f"{len(valid)} valid signatures, {quorum.threshold} required"
        )
    if update.version <= state.ruleset_version:
        raise VersionRollback(
            f"update version {update.version} <= installed "
            f"{state.ruleset_version}"
        )
    state.active_ruleset = update.new_ruleset
    state.ruleset_version = update.version
    state.update_deadline = now + state.update_interval_ms
    state.clock = max(state.clock, now)
    return state


def expire_tick(state: "GuaranteeProcessor", now: int) -> "GuaranteeProcessor":
    """Advance the expiry state machine. Idempotent.

    Past the update deadline or the active ruleset's expiry the device
    reverts to its baseline ruleset, or to a full block when none is
    configured. A live binding commitment pins the active ruleset and
    suspends reversion until it runs out.
    """
    state.clock = max(state.clock, now)
    if state.binding is not None:
        if now < state.binding.irrevocable_until:
            return state
        state.binding = None
    active = state.active_ruleset
    overdue = now >= state.update_deadline
    if overdue or (active is not None and active.expired(now)):
        if active is not state.baseline_ruleset:
            state.active_ruleset = state.baseline_ruleset
    return state


def commit_binding(
    state: "GuaranteeProcessor",
    ruleset: Ruleset,
    irrevocable_until: int,
    owner: DeviceIdentity,
    now: int,
) -> Claim:
    """Install `ruleset` as binding until `irrevocable_until` and return a
    claim any third party can verify offline against the device's key."""
    if irrevocable_until <= now:
        raise InvalidExpiry("commitment expiry must lie in the future")
    if ruleset.expiry is not None and ruleset.expiry < irrevocable_until:
        raise InvalidExpiry(
            "committed ruleset would expire before the commitment does"
        )
    if owner.device_id != state.identity.device_id:
        raise UnknownDevice("committing key does not control this device")
    if state.binding is not None and now < state.binding.irrevocable_until:
        raise CommitmentActive("an earlier commitment is still in force")
    body = commitment_body(ruleset.ruleset_id, owner.device_id, now, irrevocable_until)
    attestation = sign(owner, body, now)
    state.binding = BindingCommitment(
        ruleset_id=ruleset.ruleset_id,
        owner=owner.device_id,
        committed_at=now,
        irrevocable_until=irrevocable_until,
        attestation=attestation,
    )
    state.active_ruleset = ruleset
    state.clock = max(state.clock, now)
    return issue_claim(
        "commitment_active",
        (ruleset.ruleset_id, state.identity.device_id),
        {"committed_at": now, "irrevocable_until": irrevocable_until},
        owner,
        now,
    )


def verify_commitment(commitment: BindingCommitment, public_key: bytes) -> bool:
    att = commitment.attestation
    if att.payload != commitment.body():
        return False
    return verify_attestation(att, public_key)


def remove_commitment(state: "GuaranteeProcessor", now: int) -> "GuaranteeProcessor":
    """Withdraw a commitment once its window has passed; the device drops
    back to its baseline ruleset. Removing nothing is a no-op."""
    state.clock = max(state.clock, now)
    if state.binding is None:
        return state
    if now < state.binding.irrevocable_until:
        raise CommitmentActive(
            f"commitment is irrevocable until t={state.binding.irrevocable_until}"
        )
    state.binding = None
    state.active_ruleset = state.baseline_ruleset
    return state


# --- issuer transparency log ---

@dataclass(frozen=True)
class LogEntry:
    index: int
    prev_hash: bytes
    payload: bytes
    entry_hash: bytes


class IssuerLog:
    """Hash-chained append-only record of every license an authority has
    issued. A complete, intact chain is what makes *non*-issuance claims
    possible; any break means the question cannot be answered."""

    GENESIS = digest(b"hegsim/issuer-log/genesis")

    def __init__(self) -> None:
        self.entries: list[LogEntry] = []
        self.licenses: list[License] = []

    def head(self) -> bytes:
        return self.entries[-1].entry_hash if self.entries else self.GENESIS

    def append(self, lic: License) -> LogEntry:
        payload = lic.body()
        prev = self.head()
        entry = LogEntry(
            index=len(self.entries),
            prev_hash=prev,
            payload=payload,
            entry_hash=digest(prev + payload),
        )
        self.entries.append(entry)
        self.licenses.append(lic)
        return entry

    def verify_chain(self) -> None:
        prev = self.GENESIS
        for i, entry in enumerate(self.entries):
            if entry.index != i or entry.prev_hash != prev:
                raise LogGap(f"issuer log chain broken at entry {i}")
            if digest(prev + entry.payload) != entry.entry_hash:
                raise LogGap(f"issuer log hash mismatch at entry {i}")
            if entry.payload != self.licenses[i].body():
                raise LogGap(f"issuer log payload mismatch at entry {i}")
            prev = entry.entry_hash


def verify_issuance(lic: License, key_lookup: Mapping[bytes, bytes]) -> bool:
    """A presented license is its own proof: check the signature quorum."""
    return license_quorum_ok(lic, key_lookup)


def claim_license_not_issued(
    log: IssuerLog,
    scope: str | bytes,
    subject: bytes | str,
    attester: DeviceIdentity,
    now: int = 0,
) -> Claim:
    """Certify, over the issuer's complete intact log, that no license
    matching (scope, subject) was ever issued."""
    log.verify_chain()
    for lic in log.licenses:
        if lic.scope == scope and lic.subject in (subject, WILDCARD):
            raise ClaimRefused("a matching license appears in the issuer log")
    return issue_claim(
        "license_not_issued",
        (attester.device_id,),
        {
            "scope": scope,
            "subject": subject,
            "log_head": log.head(),
            "entries": len(log.entries),
        },
        attester,
        now,
    )
