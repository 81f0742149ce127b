"""Deterministic network model: geography, latency, bandwidth, partitions,
round-trip measurement against trusted landmarks, and attested cluster
formation.

Geometry is flat 2-D in kilometres. Link latency is the physics floor -
distance over signal speed - rounded *up* to whole milliseconds, plus any
per-node processing delay. Rounding up matters: a measured round trip can
only ever overstate distance, so a distance bound derived from it can be
widened by delay or quantisation but never tightened below the true value.

All events carry (timestamp, sequence) pairs and every traffic byte lands in
a ledger, which is what the egress-cap and sealed-payload checks read.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .encoding import blob, digest, seq, u64
from .errors import (
    BadEcho,
    ClaimRefused,
    EgressExceeded,
    MemberTampered,
    MemberUnreachable,
    StaleAttestation,
    Timeout,
    UnknownDevice,
)
from .identity import (
    Attestation,
    DeviceIdentity,
    LifeState,
    encode_sealed_blob,
    open_sealed,
    seal_to,
    sign,
    verify_attestation,
)
from .receipts import Claim, ReceiptDag, issue_claim

SIGNAL_SPEED_KM_S = 200_000  # typical optical fibre, configurable per model

_ECHO_DOMAIN = b"hegsim/echo/v1:"
_CLUSTER_DOMAIN = b"hegsim/cluster/v1:"
_LOCATION_DOMAIN = b"hegsim/location/v1:"

LANDMARK_INITIATED = "landmark_initiated"
DEVICE_INITIATED_ANONYMOUS = "device_initiated_anonymous"


@dataclass
class NodeInfo:
    identity: DeviceIdentity
    position: tuple[float, float]
    processing_delay_ms: int = 0
    landmark: bool = False
    refuse_anonymous: bool = False
    blocked_devices: frozenset[bytes] = frozenset()


@dataclass(frozen=True)
class WireRecord:
    seq: int
    sent_at: int
    delivered_at: int
    src: bytes
    dst: bytes
    kind: str
    payload: bytes


@dataclass
class ClusterConfig:
    """Attested membership of a mutually authenticated device cluster."""

    members: frozenset[bytes]
    egress_cap: int
    formed_at: int
    member_attestations: tuple[Attestation, ...]
    invalidated_at: int | None = None

    def body(self) -> bytes:
        return cluster_body(self.members, self.egress_cap, self.formed_at)

    def cluster_id(self) -> bytes:
        return digest(_CLUSTER_DOMAIN + self.body())

    def valid_at(self, at: int) -> bool:
        if at < self.formed_at:
            return False
        return self.invalidated_at is None or at < self.invalidated_at


def cluster_body(members: frozenset[bytes], egress_cap: int, formed_at: int) -> bytes:
    return (
        seq(blob(m) for m in sorted(members))
        + u64(egress_cap)
        + u64(formed_at)
    )


@dataclass(frozen=True)
class LocationClaim:
    """A distance bound derived from one round trip to a landmark.

    bound_m is the farthest the subject could be, in metres: half the round
    trip at signal speed. region_ok means the bound fits inside the allowed
    radius. In anonymous mode the ping carried a one-time token, so the
    claim is presentable without the landmark ever learning who asked.
    """

    subject: bytes
    landmark: bytes
    rtt_ms: int
    bound_m: int
    region_ok: bool
    anonymous: bool
    attestation: Attestation

    def body(self) -> bytes:
        return location_body(
            self.subject, self.landmark, self.rtt_ms, self.bound_m,
            self.region_ok, self.anonymous,
        )

    def to_claim(self, attester: DeviceIdentity, radius_km: int, now: int) -> Claim:
        return issue_claim(
            "location_in_region",
            (self.subject, self.landmark),
            {
                "bound_m": self.bound_m,
                "radius_km": radius_km,
                "region_ok": 1 if self.region_ok else 0,
            },
            attester,
            now,
        )


def location_body(
    subject: bytes,
    landmark: bytes,
    rtt_ms: int,
    bound_m: int,
    region_ok: bool,
    anonymous: bool,
) -> bytes:
    return (
        _LOCATION_DOMAIN
        + blob(subject)
        + blob(landmark)
        + u64(rtt_ms)
        + u64(bound_m)
        + u64(1 if region_ok else 0)
        + u64(1 if anonymous else 0)
    )


def verify_location_claim(claim: LocationClaim, public_key: bytes) -> bool:
    att = claim.attestation
    if att.payload != claim.body():
        return False
    return verify_attestation(att, public_key)


class NetworkModel:
    """Registry of nodes plus every link property the protocols consult."""

    def __init__(
        self,
        signal_speed_km_s: int = SIGNAL_SPEED_KM_S,
        default_bandwidth: int | None = None,
    ) -> None:
        self.signal_speed_km_s = signal_speed_km_s
        self.default_bandwidth = default_bandwidth
        self.nodes: dict[bytes, NodeInfo] = {}
        self.partitions: set[frozenset[bytes]] = set()
        self.bandwidth: dict[frozenset[bytes], int] = {}
        self.traffic: list[WireRecord] = []
        self.clusters: list[ClusterConfig] = []
        self._egress_usage: dict[tuple[bytes, int], int] = {}
        self._seq = 0
        self._nonce_counter = 0

    # -- registry --

    def register(
        self,
        identity: DeviceIdentity,
        position: tuple[float, float],
        processing_delay_ms: int = 0,
        landmark: bool = False,
        refuse_anonymous: bool = False,
        blocked_devices: frozenset[bytes] = frozenset(),
    ) -> None:
        existing = self.nodes.get(identity.device_id)
        if existing is not None and existing.identity.public_key != identity.public_key:
            raise ValueError("device id collision with a different public key")
        self.nodes[identity.device_id] = NodeInfo(
            identity=identity,
            position=position,
            processing_delay_ms=processing_delay_ms,
            landmark=landmark,
            refuse_anonymous=refuse_anonymous,
            blocked_devices=blocked_devices,
        )

    def node(self, device_id: bytes) -> NodeInfo:
        try:
            return self.nodes[device_id]
        except KeyError:
            raise UnknownDevice(f"unregistered device {device_id.hex()[:12]}") from None

    def next_nonce(self) -> bytes:
        self._nonce_counter += 1
        return digest(b"hegsim/nonce:" + u64(self._nonce_counter))[:16]

    # -- geometry --

    def distance_km(self, a: bytes, b: bytes) -> float:
        pa = self.node(a).position
        pb = self.node(b).position
        return math.hypot(pa[0] - pb[0], pa[1] - pb[1])

    def latency_ms(self, a: bytes, b: bytes) -> int:
        """One-way latency: ceil(distance / signal speed) plus processing.

        Never less than the true propagation time, by construction.
        """
        propagation = math.ceil(
            self.distance_km(a, b) * 1000 / self.signal_speed_km_s
        )
        return (
            propagation
            + self.node(a).processing_delay_ms
            + self.node(b).processing_delay_ms
        )

    def set_partition(self, a: bytes, b: bytes, severed: bool) -> None:
        link = frozenset((a, b))
        if severed:
            self.partitions.add(link)
        else:
            self.partitions.discard(link)

    def link_up(self, a: bytes, b: bytes) -> bool:
        return frozenset((a, b)) not in self.partitions

    def set_bandwidth(self, a: bytes, b: bytes, bytes_per_s: int) -> None:
        self.bandwidth[frozenset((a, b))] = bytes_per_s

    # -- traffic --

    def register_cluster(self, config: ClusterConfig) -> None:
        self.clusters.append(config)

    def invalidate_clusters_of(self, device_id: bytes, at: int) -> None:
        for config in self.clusters:
            if device_id in config.members and config.invalidated_at is None:
                config.invalidated_at = at

    def _check_egress(self, src: bytes, dst: bytes, nbytes: int, at: int) -> None:
        for config in self.clusters:
            if not config.valid_at(at):
                continue
            if src in config.members and dst not in config.members:
                key = (config.cluster_id(), at // 1000)
                used = self._egress_usage.get(key, 0)
                if used + nbytes > config.egress_cap:
                    raise EgressExceeded(
                        f"{used + nbytes} B in second {at // 1000} exceeds "
                        f"cluster egress cap {config.egress_cap} B/s"
                    )
                self._egress_usage[key] = used + nbytes

    def send(self, src: bytes, dst: bytes, payload: bytes, at: int, kind: str) -> int:
        """Deliver `payload` from src to dst; returns the delivery time.

        Raises Timeout on severed links and EgressExceeded when a cluster
        boundary cap would be crossed. Everything delivered is recorded.
        """
        if dst != EXTERNAL_NODE:
            if not self.link_up(src, dst):
                raise Timeout(f"link {src.hex()[:8]}-{dst.hex()[:8]} is severed")
        self._check_egress(src, dst, len(payload), at)
        latency = 0 if dst == EXTERNAL_NODE else self.latency_ms(src, dst)
        transmission = 0
        cap = self.bandwidth.get(frozenset((src, dst)), self.default_bandwidth)
        if cap:
            transmission = math.ceil(len(payload) * 1000 / cap)
        delivered_at = at + latency + transmission
        self._seq += 1
        self.traffic.append(
            WireRecord(
                seq=self._seq,
                sent_at=at,
                delivered_at=delivered_at,
                src=src,
                dst=dst,
                kind=kind,
                payload=payload,
            )
        )
        return delivered_at

    def wire_payloads(self) -> list[bytes]:
        return [record.payload for record in self.traffic]


# Pseudo-node id for endpoints outside the governed ecosystem.
EXTERNAL_NODE = digest(b"hegsim/external-endpoint")


# --- round trips and location ---

def measure_rtt(
    net: NetworkModel,
    challenger: bytes,
    responder: bytes,
    nonce: bytes,
    added_delay_ms: int = 0,
    anonymous: bool = False,
    at: int = 0,
) -> int:
    """Challenge-response round trip in milliseconds.

    The responder signs the nonce, which rules out replays and proves the
    echo came from the holder of the responder's key. `added_delay_ms` is
    delay the responder deliberately inserts to blur its position; it can
    only ever widen the resulting distance bound.
    """
    if not net.link_up(challenger, responder):
        raise Timeout("no path to responder")
    responder_node = net.node(responder)
    if responder_node.identity.life_state is not LifeState.ACTIVE:
        raise Timeout("responder's key is wiped; no signed echo")
    if anonymous and responder_node.refuse_anonymous:
        raise Timeout("responder refuses pings that do not identify themselves")
    if not anonymous and challenger in responder_node.blocked_devices:
        raise Timeout("responder ignores pings from this device")

    latency = net.latency_ms(challenger, responder)
    challenge_payload = nonce if anonymous else blob(challenger) + nonce
    net.send(challenger, responder, challenge_payload, at, kind="ping")
    echo = sign(responder_node.identity, _ECHO_DOMAIN + nonce, at + latency)
    net.send(
        responder,
        challenger,
        echo.signature + echo.payload,
        at + latency + added_delay_ms,
        kind="echo",
    )
    if echo.payload != _ECHO_DOMAIN + nonce:
        raise BadEcho("echo does not bind the challenge nonce")
    if not verify_attestation(echo, responder_node.identity.public_key):
        raise BadEcho("echo signature does not verify")
    return 2 * latency + added_delay_ms


def distance_bound_m(rtt_ms: int, signal_speed_km_s: int) -> int:
    """Upper bound on distance in metres implied by a round trip."""
    return -(-rtt_ms * signal_speed_km_s // 2)  # ceil division


def verify_location(
    net: NetworkModel,
    device: bytes,
    landmark: bytes,
    allowed_radius_km: int,
    mode: str = LANDMARK_INITIATED,
    added_delay_ms: int = 0,
    at: int = 0,
) -> LocationClaim:
    """Bound a device's distance from a trusted landmark.

    Landmark-initiated: the landmark challenges the device and attests the
    result. Device-initiated anonymous: the device pings the landmark with a
    one-time token and attests its own measurement, so it can prove where it
    is without telling the landmark who it is.
    """
    if mode not in (LANDMARK_INITIATED, DEVICE_INITIATED_ANONYMOUS):
        raise ValueError(f"unknown location mode: {mode}")
    nonce = net.next_nonce()
    if mode == LANDMARK_INITIATED:
        rtt = measure_rtt(
            net, landmark, device, nonce, added_delay_ms=added_delay_ms, at=at
        )
        attester = net.node(landmark).identity
    else:
        rtt = measure_rtt(
            net, device, landmark, nonce,
            added_delay_ms=added_delay_ms, anonymous=True, at=at,
        )
        attester = net.node(device).identity
    bound = distance_bound_m(rtt, net.signal_speed_km_s)
    region_ok = bound <= allowed_radius_km * 1000
    anonymous = mode == DEVICE_INITIATED_ANONYMOUS
    body = location_body(device, landmark, rtt, bound, region_ok, anonymous)
    return LocationClaim(
        subject=device,
        landmark=landmark,
        rtt_ms=rtt,
        bound_m=bound,
        region_ok=region_ok,
        anonymous=anonymous,
        attestation=sign(attester, body, at),
    )


def enforce_location_restriction(state, claim: LocationClaim | None) -> None:
    """Apply a check outcome: a failed ping or an out-of-region bound drops
    the device to its baseline ruleset; a good claim lifts the restriction."""
    if claim is None or not claim.region_ok:
        state.location_restricted = True
    else:
        state.location_restricted = False


# --- clusters ---

def form_cluster(
    net: NetworkModel,
    member_ids: list[bytes],
    egress_cap: int,
    now: int,
) -> ClusterConfig:
    """Mutually authenticate a member set and attest the configuration.

    Every pair exchanges sealed hellos over the network (so the handshake
    is visible in the traffic ledger), then every member signs the sorted
    membership, egress cap, and formation time.
    """
    members = sorted(set(member_ids))
    if len(members) < 2:
        raise ValueError("a cluster needs at least two members")
    for member in members:
        node = net.node(member)
        if node.identity.life_state is not LifeState.ACTIVE:
            raise MemberTampered(
                f"member {member.hex()[:12]} is {node.identity.life_state.value}"
            )
    for i, a in enumerate(members):
        for b in members[i + 1:]:
            if not net.link_up(a, b):
                raise MemberUnreachable(
                    f"no link between {a.hex()[:8]} and {b.hex()[:8]}"
                )

    for i, a in enumerate(members):
        for b in members[i + 1:]:
            node_a = net.node(a)
            node_b = net.node(b)
            nonce = net.next_nonce()
            hello = seal_to(
                node_b.identity.public_key, b"hello:" + nonce, node_a.identity, now
            )
            net.send(a, b, encode_sealed_blob(hello), now, kind="cluster_handshake")
            if open_sealed(hello, node_b.identity) != b"hello:" + nonce:
                raise MemberTampered("handshake decryption mismatch")
            reply = seal_to(
                node_a.identity.public_key, b"ack:" + nonce, node_b.identity, now
            )
            net.send(b, a, encode_sealed_blob(reply), now, kind="cluster_handshake")
            if open_sealed(reply, node_a.identity) != b"ack:" + nonce:
                raise MemberTampered("handshake decryption mismatch")

    member_set = frozenset(members)
    body = cluster_body(member_set, egress_cap, now)
    attestations = tuple(
        sign(net.node(m).identity, _CLUSTER_DOMAIN + body, now) for m in members
    )
    for member in members:
        if net.node(member).identity.life_state is not LifeState.ACTIVE:
            raise MemberTampered("member wiped mid-handshake")
    config = ClusterConfig(
        members=member_set,
        egress_cap=egress_cap,
        formed_at=now,
        member_attestations=attestations,
    )
    net.register_cluster(config)
    return config


def cluster_current(net: NetworkModel, config: ClusterConfig, at: int) -> bool:
    """A config is current while every member attestation verifies, every
    member key is still live, and nothing has invalidated it."""
    if not config.valid_at(at):
        return False
    if len(config.member_attestations) != len(config.members):
        return False
    body = _CLUSTER_DOMAIN + config.body()
    for att in config.member_attestations:
        if att.signer not in config.members or att.payload != body:
            return False
        node = net.nodes.get(att.signer)
        if node is None or node.identity.life_state is not LifeState.ACTIVE:
            return False
        if not verify_attestation(att, node.identity.public_key):
            return False
    return True


def verify_cluster_constraints(
    net: NetworkModel,
    config: ClusterConfig,
    max_members: int,
    max_egress: int,
    attester: DeviceIdentity,
    now: int,
) -> Claim:
    """Attest that a current cluster fits within (max_members, max_egress).

    A device holding such a claim satisfies a baseline ruleset's
    small-cluster allowance.
    """
    if not cluster_current(net, config, now):
        raise StaleAttestation("cluster attestations are no longer current")
    if len(config.members) > max_members:
        raise ClaimRefused(
            f"{len(config.members)} members exceed the {max_members} bound"
        )
    if config.egress_cap > max_egress:
        raise ClaimRefused(
            f"egress cap {config.egress_cap} exceeds the {max_egress} bound"
        )
    return issue_claim(
        "cluster_config",
        (config.cluster_id(),),
        {
            "members": len(config.members),
            "egress_cap": config.egress_cap,
            "max_members": max_members,
            "max_egress": max_egress,
            "formed_at": config.formed_at,
        },
        attester,
        now,
    )


def verify_cross_device_parents(dag: ReceiptDag, coverage) -> None:
    """Soundness check over a combined graph: a receipt may consume another
    device's result only when `coverage(producer_a, producer_b, at)` says the
    two shared a valid cluster (or an authenticated transfer) at that time."""
    for receipt in dag.receipts.values():
        for parent_id in receipt.parents:
            parent = dag.receipts.get(parent_id)
            if parent is None or parent.producer == receipt.producer:
                continue
            if not coverage(receipt.producer, parent.producer, receipt.interval[0]):
                raise ClaimRefused(
                    f"receipt {receipt.receipt_id.hex()[:12]} consumes a "
                    f"foreign result without shared cluster or transfer"
                )
