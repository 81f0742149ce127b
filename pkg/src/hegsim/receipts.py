"""Workload receipts, the provenance DAG, and minimal-disclosure claims.

A receipt records one workload step: which intermediate results it consumed
(parents), how many floating-point operations it contributed, what external
data it read, and free-form tags. Receipts form a DAG whose roots are origin
steps such as random weight initialization. Aggregates (total FLOP, total
data) are sums over the *ancestor set* of a result, so a receipt reachable
along several paths is counted exactly once.

Claims are the exportable side: signed statements derived from the DAG that
reveal only what they assert (a threshold, a tag predicate, a recipient
set), never the underlying totals or per-device breakdown.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Iterable, Mapping

from .encoding import (
    blob,
    digest,
    kv_map,
    read_blob,
    read_kv_map,
    read_text,
    read_u64,
    seq,
    text,
    u64,
)
from .errors import (
    AccountingGap,
    BadSignature,
    ClaimRefused,
    CycleDetected,
    ThresholdExceeded,
    UnknownDevice,
    UnknownParent,
    UnknownReceipt,
)
from .identity import Attestation, DeviceIdentity, sign, sign_raw, verify_attestation, verify_raw

if TYPE_CHECKING:  # pragma: no cover - typing only
    from .device import SharingLogEntry

OP_CLASSES = frozenset({
    "training_step",
    "inference",
    "data_transform",
    "simulation",
    "evaluation",
    "transfer",
    "idle",
})

# Operation classes that count as AI workloads for negative claims.
AI_OP_CLASSES = frozenset({"training_step", "inference", "evaluation"})

_RECEIPT_DOMAIN = b"hegsim/receipt/v1:"
_CLAIM_MAGIC = b"HEGC\x01"

# Marker recipient for transfers that leave the governed ecosystem.
EXTERNAL = "external"


@dataclass(frozen=True)
class Receipt:
    """Signed record of one workload step."""

    receipt_id: bytes
    producer: bytes
    op_class: str
    parents: tuple[bytes, ...]
    flop: int
    data_in: tuple[tuple[bytes, int], ...]
    tags: frozenset[str]
    interval: tuple[int, int]
    signature: bytes

    def body(self) -> bytes:
        return receipt_body(
            self.producer, self.op_class, self.parents, self.flop,
            self.data_in, self.tags, self.interval,
        )


def receipt_body(
    producer: bytes,
    op_class: str,
    parents: Iterable[bytes],
    flop: int,
    data_in: Iterable[tuple[bytes, int]],
    tags: Iterable[str],
    interval: tuple[int, int],
) -> bytes:
    return (
        blob(producer)
        + text(op_class)
        + seq(blob(p) for p in parents)
        + u64(flop)
        + seq(blob(d) + u64(n) for d, n in data_in)
        + seq(text(t) for t in sorted(tags))
        + u64(interval[0])
        + u64(interval[1])
    )


def make_receipt(
    producer: bytes,
    op_class: str,
    parents: Iterable[bytes] = (),
    flop: int = 0,
    data_in: Iterable[tuple[bytes, int]] = (),
    tags: Iterable[str] = (),
    interval: tuple[int, int] = (0, 0),
    signature: bytes = b"",
) -> Receipt:
    """Build a receipt and derive its id from the canonical body.

    Does not sign; `emit_receipt` is the signing path. Unsigned receipts are
    useful for locally reconstructing a graph whose signatures are checked
    separately.
    """
    parents = tuple(parents)
    if len(set(parents)) != len(parents):
        raise ValueError("duplicate parent references")
    if op_class not in OP_CLASSES:
        raise ValueError(f"unknown op_class: {op_class}")
    if flop < 0:
        raise ValueError("flop must be non-negative")
    if interval[0] > interval[1]:
        raise ValueError("interval start after end")
    data_in = tuple((bytes(d), int(n)) for d, n in data_in)
    tags = frozenset(tags)
    body = receipt_body(producer, op_class, parents, flop, data_in, tags, interval)
    return Receipt(
        receipt_id=digest(_RECEIPT_DOMAIN + body),
        producer=producer,
        op_class=op_class,
        parents=parents,
        flop=flop,
        data_in=data_in,
        tags=tags,
        interval=interval,
        signature=signature,
    )


class ReceiptDag:
    """Append-only provenance graph of receipts.

    Acyclicity is structural: a receipt may only be inserted once all of its
    parents are present (or explicitly declared as roots), and ids are
    digests of bodies, so no later insertion can point back at it except by
    forging its own id into its parent list - which is rejected.
    """

    def __init__(self) -> None:
        self.receipts: dict[bytes, Receipt] = {}
        self.roots: set[bytes] = set()
        self.declared_data: set[bytes] = set()

    def __contains__(self, receipt_id: bytes) -> bool:
        return receipt_id in self.receipts

    def __len__(self) -> int:
        return len(self.receipts)

    def get(self, receipt_id: bytes) -> Receipt:
        try:
            return self.receipts[receipt_id]
        except KeyError:
            raise UnknownReceipt(f"no receipt {receipt_id.hex()[:12]}") from None

    def declare_data_root(self, data_digest: bytes) -> None:
        """Mark a data digest as a known, audited external source."""
        self.declared_data.add(data_digest)

    def add(self, receipt: Receipt, declare_missing_parents: bool = False) -> None:
        """Insert a receipt. Idempotent for an id already present.

        `declare_missing_parents` supports importing a receipt from another
        device whose ancestry is not locally known: the absent parents are
        recorded as bare root ids contributing nothing to local aggregates.
        """
        if receipt.receipt_id in self.receipts:
            return
        if receipt.receipt_id in receipt.parents:
            raise CycleDetected("receipt lists itself as a parent")
        for parent in receipt.parents:
            if parent in self.receipts or parent in self.roots:
                continue
            if declare_missing_parents:
                self.roots.add(parent)
            else:
                raise UnknownParent(f"unknown parent {parent.hex()[:12]}")
        self.receipts[receipt.receipt_id] = receipt
        if not receipt.parents:
            self.roots.add(receipt.receipt_id)

    def ancestors(self, result: bytes) -> set[bytes]:
        """The ancestor set of `result`, including `result` itself."""
        if result not in self.receipts:
            raise UnknownReceipt(f"no receipt {result.hex()[:12]}")
        seen: set[bytes] = set()
        stack = [result]
        while stack:
            rid = stack.pop()
            if rid in seen:
                continue
            seen.add(rid)
            receipt = self.receipts.get(rid)
            if receipt is not None:
                stack.extend(p for p in receipt.parents if p not in seen)
        return seen

    def roots_of(self, result: bytes) -> frozenset[bytes]:
        """Origin nodes reachable from `result` - the lineage identity."""
        return frozenset(r for r in self.ancestors(result) if r in self.roots)


def emit_receipt(
    dag: ReceiptDag,
    producer: DeviceIdentity,
    op_class: str,
    parents: Iterable[bytes] = (),
    flop: int = 0,
    data_in: Iterable[tuple[bytes, int]] = (),
    tags: Iterable[str] = (),
    interval: tuple[int, int] = (0, 0),
) -> Receipt:
    """Sign a new receipt as `producer` and append it to `dag`."""
    producer.require_active()
    parents = tuple(parents)
    for parent in parents:
        if parent not in dag.receipts and parent not in dag.roots:
            raise UnknownParent(f"unknown parent {parent.hex()[:12]}")
    unsigned = make_receipt(
        producer.device_id, op_class, parents, flop, data_in, tags, interval
    )
    signed = replace(
        unsigned, signature=sign_raw(producer, _RECEIPT_DOMAIN + unsigned.body())
    )
    dag.add(signed)
    return signed


def verify_receipt(receipt: Receipt, public_key: bytes) -> bool:
    body = receipt.body()
    if digest(_RECEIPT_DOMAIN + body) != receipt.receipt_id:
        return False
    return verify_raw(public_key, _RECEIPT_DOMAIN + body, receipt.signature)


def verify_dag(dag: ReceiptDag, key_lookup: Mapping[bytes, bytes]) -> None:
    """Check ids, signatures, referential integrity, and acyclicity.

    Raises on the first problem found. `key_lookup` maps device ids to
    public keys.
    """
    for receipt in dag.receipts.values():
        public_key = key_lookup.get(receipt.producer)
        if public_key is None:
            raise UnknownDevice(
                f"no key for producer {receipt.producer.hex()[:12]}"
            )
        if not verify_receipt(receipt, public_key):
            raise BadSignature(
                f"receipt {receipt.receipt_id.hex()[:12]} fails id or signature check"
            )
        for parent in receipt.parents:
            if parent not in dag.receipts and parent not in dag.roots:
                raise UnknownParent(f"unknown parent {parent.hex()[:12]}")
    _check_acyclic(dag)


def _check_acyclic(dag: ReceiptDag) -> None:
    state: dict[bytes, int] = {}  # 1 = in progress, 2 = done
    for start in dag.receipts:
        if state.get(start):
            continue
        stack: list[tuple[bytes, int]] = [(start, 0)]
        while stack:
            node, idx = stack.pop()
            receipt = dag.receipts.get(node)
            parents = receipt.parents if receipt else ()
            if idx == 0:
                if state.get(node) == 1:
                    raise CycleDetected("provenance graph contains a cycle")
                if state.get(node) == 2:
                    continue
                state[node] = 1
            if idx < len(parents):
                stack.append((node, idx + 1))
                nxt = parents[idx]
                if state.get(nxt) == 1:
                    raise CycleDetected("provenance graph contains a cycle")
                if state.get(nxt) != 2:
                    stack.append((nxt, 0))
            else:
                state[node] = 2


# --- aggregation ---

def total_flop(dag: ReceiptDag, result: bytes) -> int:
    """Total FLOP over the ancestor set of `result`, each receipt once."""
    return sum(
        dag.receipts[r].flop for r in dag.ancestors(result) if r in dag.receipts
    )


def total_data(dag: ReceiptDag, result: bytes) -> int:
    """Total external data bytes consumed across the ancestor set."""
    total = 0
    for rid in dag.ancestors(result):
        receipt = dag.receipts.get(rid)
        if receipt is not None:
            total += sum(n for _, n in receipt.data_in)
    return total


def training_flop(dag: ReceiptDag, result: bytes) -> int:
    """Like total_flop but counting only training-step receipts."""
    return sum(
        dag.receipts[r].flop
        for r in dag.ancestors(result)
        if r in dag.receipts and dag.receipts[r].op_class == "training_step"
    )


def has_external_inputs(dag: ReceiptDag, result: bytes) -> bool:
    """True when some ancestor consumed data that is neither a declared
    source nor a tracked intermediate result. Claims over such lineages
    carry an external-inputs qualifier rather than being refused."""
    ancestry = dag.ancestors(result)
    for rid in ancestry:
        receipt = dag.receipts.get(rid)
        if receipt is None:
            continue
        for data_digest, _ in receipt.data_in:
            if data_digest in dag.declared_data:
                continue
            if data_digest in ancestry:
                continue
            return True
    return False


# --- claims ---

CLAIM_KINDS = frozenset({
    "flop_below",
    "flop_exact",
    "data_below",
    "not_used_for_ai",
    "tag_absent",
    "tag_present",
    "shared_only_with",
    "accounting_balanced",
    "cluster_config",
    "location_in_region",
    "eval_score",
    "commitment_active",
    "license_not_issued",
})


@dataclass(frozen=True)
class Claim:
    """A signed, minimal-disclosure assertion derived from receipts."""

    kind: str
    subject: tuple[bytes, ...]
    params: tuple[tuple[str, object], ...]
    attesters: tuple[bytes, ...]
    attestation: Attestation

    def param(self, key: str):
        for k, v in self.params:
            if k == key:
                return v
        raise KeyError(key)

    def body(self) -> bytes:
        return claim_body(self.kind, self.subject, self.params, self.attesters)


def claim_body(
    kind: str,
    subject: Iterable[bytes],
    params: Iterable[tuple[str, object]],
    attesters: Iterable[bytes],
) -> bytes:
    return (
        text(kind)
        + seq(blob(s) for s in subject)
        + kv_map(params)
        + seq(blob(a) for a in attesters)
    )


def issue_claim(
    kind: str,
    subject: Iterable[bytes],
    params: Mapping[str, object],
    attester: DeviceIdentity,
    now: int,
) -> Claim:
    if kind not in CLAIM_KINDS:
        raise ValueError(f"unknown claim kind: {kind}")
    subject = tuple(subject)
    param_items = tuple(sorted(params.items()))
    attesters = (attester.device_id,)
    body = claim_body(kind, subject, param_items, attesters)
    return Claim(
        kind=kind,
        subject=subject,
        params=param_items,
        attesters=attesters,
        attestation=sign(attester, body, now),
    )


def verify_claim(claim: Claim, public_key: bytes) -> bool:
    """Offline check: body matches, signer is a listed attester, signature
    verifies under `public_key`."""
    att = claim.attestation
    if att.payload != claim.body():
        return False
    if att.signer not in claim.attesters:
        return False
    return verify_attestation(att, public_key)


def encode_claim(claim: Claim) -> bytes:
    att = claim.attestation
    return (
        _CLAIM_MAGIC
        + claim.body()
        + blob(att.signer)
        + u64(att.issued_at)
        + blob(att.signature)
    )


def decode_claim(data: bytes) -> Claim:
    if data[: len(_CLAIM_MAGIC)] != _CLAIM_MAGIC:
        raise ValueError("not a claim file (bad magic)")
    off = len(_CLAIM_MAGIC)
    kind, off = read_text(data, off)
    count, off = read_u64(data, off)
    subject = []
    for _ in range(count):
        s, off = read_blob(data, off)
        subject.append(s)
    params, off = read_kv_map(data, off)
    count, off = read_u64(data, off)
    attesters = []
    for _ in range(count):
        a, off = read_blob(data, off)
        attesters.append(a)
    signer, off = read_blob(data, off)
    issued_at, off = read_u64(data, off)
    signature, off = read_blob(data, off)
    if off != len(data):
        raise ValueError("trailing bytes after claim")
    body = claim_body(kind, subject, params, attesters)
    return Claim(
        kind=kind,
        subject=tuple(subject),
        params=params,
        attesters=tuple(attesters),
        attestation=Attestation(
            payload=body, signer=signer, signature=signature, issued_at=issued_at
        ),
    )


def _qualify(dag: ReceiptDag, result: bytes, params: dict) -> dict:
    if has_external_inputs(dag, result):
        params["external_inputs"] = 1
    return params


def claim_flop_below(
    dag: ReceiptDag,
    result: bytes,
    threshold: int,
    attester: DeviceIdentity,
    now: int = 0,
) -> Claim:
    """Attest that `result` was produced with strictly less than `threshold`
    FLOP. The claim reveals the threshold and the subject id only; if the
    total is not below, the claim is refused, never falsified."""
    total = total_flop(dag, result)
    if total >= threshold:
        raise ThresholdExceeded(
            f"total is not below {threshold}; claim refused"
        )
    params = _qualify(dag, result, {"threshold": threshold})
    return issue_claim("flop_below", (result,), params, attester, now)


def claim_flop_exact(
    dag: ReceiptDag, result: bytes, attester: DeviceIdentity, now: int = 0
) -> Claim:
    """Full-disclosure variant: attest the exact ancestor-set FLOP total."""
    params = _qualify(dag, result, {"total": total_flop(dag, result)})
    return issue_claim("flop_exact", (result,), params, attester, now)


def claim_data_below(
    dag: ReceiptDag,
    result: bytes,
    threshold: int,
    attester: DeviceIdentity,
    now: int = 0,
) -> Claim:
    total = total_data(dag, result)
    if total >= threshold:
        raise ThresholdExceeded(
            f"data total is not below {threshold}; claim refused"
        )
    params = _qualify(dag, result, {"threshold": threshold})
    return issue_claim("data_below", (result,), params, attester, now)


def query_tags(
    dag: ReceiptDag,
    result: bytes,
    tag: str,
    mode: str,
    attester: DeviceIdentity,
    now: int = 0,
) -> Claim:
    """Attest a tag predicate over the ancestry of `result`.

    mode "present_anywhere": some ancestor carries the tag.
    mode "absent_everywhere": no ancestor carries the tag.
    Exactly one of the two can succeed for a given (result, tag).
    """
    if mode not in ("present_anywhere", "absent_everywhere"):
        raise ValueError(f"unknown tag query mode: {mode}")
    present = any(
        tag in dag.receipts[r].tags
        for r in dag.ancestors(result)
        if r in dag.receipts
    )
    if mode == "present_anywhere" and not present:
        raise ClaimRefused(f"no ancestor of the result carries tag {tag!r}")
    if mode == "absent_everywhere" and present:
        raise ClaimRefused(f"an ancestor of the result carries tag {tag!r}")
    kind = "tag_present" if mode == "present_anywhere" else "tag_absent"
    params = _qualify(dag, result, {"tag": tag})
    return issue_claim(kind, (result,), params, attester, now)


def compute_accounting(
    dag: ReceiptDag,
    devices: Iterable[bytes],
    period: tuple[int, int],
    capacity_flop_per_s: Mapping[bytes, int] | int,
    attester: DeviceIdentity,
    now: int = 0,
    require_no_ai: bool = False,
    tolerance: int = 0,
) -> Claim:
    """Balance receipts against rated capacity over a period.

    Every receipt produced by `devices` whose interval falls within `period`
    is summed - including explicit idle receipts, which carry the
    FLOP-equivalent of their elapsed idle capacity - and compared with
    capacity x duration. A shortfall beyond `tolerance` signals unaccounted
    compute and refuses the claim.

    With `require_no_ai`, additionally asserts that no AI-class receipt
    (training, inference, evaluation) exists in the period.
    """
    devices = sorted(set(devices))
    if not devices:
        raise UnknownDevice("empty device set")
    start, end = period
    if start > end:
        raise ValueError("period start after end")

    def rate_for(device: bytes) -> int:
        if isinstance(capacity_flop_per_s, int):
            return capacity_flop_per_s
        try:
            return capacity_flop_per_s[device]
        except KeyError:
            raise UnknownDevice(
                f"no capacity rating for {device.hex()[:12]}"
            ) from None

    device_set = set(devices)
    in_period = [
        r
        for r in dag.receipts.values()
        if r.producer in device_set
        and start <= r.interval[0]
        and r.interval[1] <= end
    ]
    accounted = sum(r.flop for r in in_period)
    capacity = sum(rate_for(d) * (end - start) // 1000 for d in devices)
    gap = capacity - accounted
    if abs(gap) > tolerance:
        raise AccountingGap(gap)

    kind = "accounting_balanced"
    if require_no_ai:
        ai = [r for r in in_period if r.op_class in AI_OP_CLASSES]
        if ai:
            raise ClaimRefused(
                f"{len(ai)} AI-class receipts present in the period"
            )
        kind = "not_used_for_ai"
    params = {
        "period_start": start,
        "period_end": end,
        "capacity": capacity,
    }
    return issue_claim(kind, tuple(devices), params, attester, now)


def sharing_claim(
    log: Iterable["SharingLogEntry"],
    result: bytes,
    attester: DeviceIdentity,
    now: int = 0,
) -> Claim:
    """Attest the exact set of recipients that ever received `result`.

    An empty set is a valid answer. Transfers to endpoints outside the
    governed ecosystem appear as the sentinel "external", so rules about
    never sharing with ungoverned devices stay checkable.
    """
    recipients: set[object] = set()
    for entry in log:
        if entry.result != result:
            continue
        if entry.recipient == EXTERNAL:
            recipients.add(EXTERNAL)
        else:
            recipients.add(entry.recipient)
    encoded = tuple(
        sorted(
            r if isinstance(r, str) else r.hex()
            for r in recipients
        )
    )
    return issue_claim(
        "shared_only_with", (result,), {"recipients": encoded}, attester, now
    )


# --- wire form ---

def encode_receipt(receipt: Receipt) -> bytes:
    """Self-contained wire form: id, canonical body, signature."""
    return (
        blob(receipt.receipt_id) + blob(receipt.body()) + blob(receipt.signature)
    )


def decode_receipt(data: bytes) -> Receipt:
    receipt_id, off = read_blob(data, 0)
    body, off = read_blob(data, off)
    signature, off = read_blob(data, off)
    if off != len(data):
        raise ValueError("trailing bytes after receipt")
    return decode_receipt_body(receipt_id, body, signature)


def decode_receipt_body(receipt_id: bytes, body: bytes, signature: bytes) -> Receipt:
    producer, off = read_blob(body, 0)
    op_class, off = read_text(body, off)
    count, off = read_u64(body, off)
    parents = []
    for _ in range(count):
        parent, off = read_blob(body, off)
        parents.append(parent)
    flop, off = read_u64(body, off)
    count, off = read_u64(body, off)
    data_in = []
    for _ in range(count):
        data_hash, off = read_blob(body, off)
        nbytes, off = read_u64(body, off)
        data_in.append((data_hash, nbytes))
    count, off = read_u64(body, off)
    tags = []
    for _ in range(count):
        tag, off = read_text(body, off)
        tags.append(tag)
    start, off = read_u64(body, off)
    end, off = read_u64(body, off)
    if off != len(body):
        raise ValueError("trailing bytes in receipt body")
    receipt = Receipt(
        receipt_id=receipt_id,
        producer=producer,
        op_class=op_class,
        parents=tuple(parents),
        flop=flop,
        data_in=tuple(data_in),
        tags=frozenset(tags),
        interval=(start, end),
        signature=signature,
    )
    if receipt.body() != body:
        raise ValueError("receipt body does not re-encode canonically")
    return receipt


# --- JSON export (human-readable, never signed) ---

def receipt_to_json(receipt: Receipt) -> dict:
    return {
        "receipt_id": receipt.receipt_id.hex(),
        "producer": receipt.producer.hex(),
        "op_class": receipt.op_class,
        "parents": [p.hex() for p in receipt.parents],
        "flop": receipt.flop,
        "data_in": [[d.hex(), n] for d, n in receipt.data_in],
        "tags": sorted(receipt.tags),
        "interval": list(receipt.interval),
        "signature": receipt.signature.hex(),
    }


def _param_to_json(value):
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, tuple):
        return [_param_to_json(v) for v in value]
    return value


def claim_to_json(claim: Claim) -> dict:
    return {
        "kind": claim.kind,
        "subject": [s.hex() for s in claim.subject],
        "params": {k: _param_to_json(v) for k, v in claim.params},
        "attesters": [a.hex() for a in claim.attesters],
        "issued_at": claim.attestation.issued_at,
        "signature": claim.attestation.signature.hex(),
    }
