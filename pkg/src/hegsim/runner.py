"""Deterministic scenario execution and report assembly.

The runner instantiates identities from the scenario seed, wires up the
network, replays the script strictly in order, and produces a report whose
bytes depend only on (scenario, seed). Claims issued along the way are
embedded in the report as hex of their canonical binary form and verified
against the issuing key before being reported.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .device import GuaranteeProcessor, WorkloadRequest, encode_deployment
from .encoding import digest, u64
from .errors import GuaranteeError, ParseError, UnknownReference
from .identity import DeviceIdentity, encode_sealed_blob, generate_identity, seal_to
from .netsim import (
    EXTERNAL_NODE,
    NetworkModel,
    enforce_location_restriction,
    form_cluster,
    verify_cluster_constraints,
    verify_location,
)
from .policy import (
    DEFAULT_UPDATE_INTERVAL_MS,
    QuorumConfig,
    Ruleset,
    allow_whitelisted,
    controlled_deployment,
    make_license,
    make_ruleset,
    make_update,
    max_cluster_egress,
    max_training_flop,
    require_eval_every,
    require_license,
    share_only_to,
)
from .receipts import (
    EXTERNAL,
    Claim,
    ReceiptDag,
    claim_data_below,
    claim_flop_below,
    claim_flop_exact,
    claim_to_json,
    compute_accounting,
    encode_claim,
    encode_receipt,
    query_tags,
    sharing_claim,
    total_data,
    total_flop,
    verify_claim,
    verify_dag,
)
from .scenario import Scenario, data_digest

REPORT_SCHEMA = 1

# Flag at least this many same-tagged, time-overlapping training lineages.
SIMILAR_RUNS_MIN = 3


@dataclass
class RunResult:
    report: dict
    passed: bool
    network: NetworkModel
    devices: dict[str, GuaranteeProcessor]
    claims: dict[str, Claim]
    labeled_payloads: dict[str, bytes] = field(default_factory=dict)


class ScenarioRunner:
    def __init__(self, scenario: Scenario, seed: int | None = None) -> None:
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.net = NetworkModel(
            signal_speed_km_s=scenario.network.get("signal_speed_km_s", 200_000),
            default_bandwidth=scenario.network.get("default_bandwidth_bytes_s"),
        )
        self.authorities: dict[str, DeviceIdentity] = {}
        self.devices: dict[str, GuaranteeProcessor] = {}
        self.names_by_id: dict[bytes, str] = {}
        self._identities: dict[str, DeviceIdentity] = {}
        self.receipts: dict[str, bytes] = {}      # label -> receipt id
        self.claims: dict[str, Claim] = {}        # label -> claim
        self.clusters: dict[str, object] = {}     # label -> ClusterConfig
        self.payloads: dict[str, bytes] = {}      # label -> plaintext kept off-wire
        self.trace: list[dict] = []
        self._build_world()

    # -- construction --

    def _identity_seed(self, kind: str, name: str) -> bytes:
        return digest(b"hegsim/world:" + u64(self.seed) + kind.encode() + b":" + name.encode())

    def _build_world(self) -> None:
        scenario = self.scenario
        for spec in scenario.authorities:
            identity = generate_identity(self._identity_seed("authority", spec["name"]))
            self.authorities[spec["name"]] = identity
            self._remember(identity, spec["name"])
        authority_keys = {
            identity.device_id: identity.public_key
            for identity in self.authorities.values()
        }
        for spec in scenario.devices:
            identity = generate_identity(self._identity_seed("device", spec["name"]))
            self._remember(identity, spec["name"])
        for spec in scenario.devices:
            name = spec["name"]
            identity = self._identities[name]
            quorum = None
            if "quorum" in spec:
                quorum = QuorumConfig(
                    signer_keys=tuple(
                        self.authorities[signer].public_key
                        for signer in spec["quorum"]["signers"]
                    ),
                    threshold=spec["quorum"]["threshold"],
                )
            proc = GuaranteeProcessor(
                identity,
                active_ruleset=self._build_ruleset(spec.get("ruleset")),
                baseline_ruleset=self._build_ruleset(spec.get("baseline"), baseline=True),
                quorum=quorum,
                update_interval_ms=spec.get(
                    "update_interval_ms", DEFAULT_UPDATE_INTERVAL_MS
                ),
                authority_keys=authority_keys,
                now=0,
            )
            self.devices[name] = proc
            position = spec.get("position", [0, 0])
            self.net.register(
                identity,
                (float(position[0]), float(position[1])),
                processing_delay_ms=spec.get("processing_delay_ms", 0),
                landmark=spec.get("landmark", False),
                refuse_anonymous=spec.get("refuse_anonymous", False),
                blocked_devices=frozenset(
                    self._device_id(blocked) for blocked in spec.get("blocked_devices", [])
                ),
            )
        # Landmarks that are pure reference points still need registration;
        # authorities do not sit on the network.

    def _remember(self, identity: DeviceIdentity, name: str) -> None:
        if identity.device_id in self.names_by_id:
            raise ParseError(f"seed collision between identities ({name})")
        self.names_by_id[identity.device_id] = name
        self._identities[name] = identity

    def _identity_for(self, name: str) -> DeviceIdentity:
        try:
            return self._identities[name]
        except KeyError:
            raise UnknownReference(f"unknown device or authority {name!r}") from None

    def _device(self, name: str, path: str) -> GuaranteeProcessor:
        try:
            return self.devices[name]
        except KeyError:
            raise UnknownReference(f"{path}: unknown device {name!r}") from None

    def _device_id(self, name: str) -> bytes:
        return self._identity_for(name).device_id

    def _signer(self, name: str, path: str) -> DeviceIdentity:
        try:
            return self._identities[name]
        except KeyError:
            raise UnknownReference(f"{path}: unknown signer {name!r}") from None

    def _public_key(self, device_id: bytes) -> bytes | None:
        name = self.names_by_id.get(device_id)
        if name is None:
            return None
        return self._identity_for(name).public_key

    def _key_directory(self) -> dict[bytes, bytes]:
        return {
            identity.device_id: identity.public_key
            for identity in self._identities.values()
        }

    # -- specs --

    def _build_rule(self, spec: dict):
        kind = spec["kind"]
        rule_id = spec.get("rule_id", kind)
        if kind == "max_training_flop":
            return max_training_flop(spec["limit"], rule_id)
        if kind == "require_license":
            return require_license(spec["action_class"], rule_id)
        if kind == "share_only_to":
            if spec.get("mode") == "governed_only":
                return share_only_to("governed_only", rule_id)
            return share_only_to(
                [self._device_id(name) for name in spec["devices"]], rule_id
            )
        if kind == "require_eval_every":
            return require_eval_every(spec["flop_interval"], rule_id)
        if kind == "controlled_deployment":
            return controlled_deployment(
                spec["min_flop"],
                [self._device_id(name) for name in spec["approved"]],
                spec.get("required_tags", []),
                rule_id,
            )
        if kind == "max_cluster_egress":
            return max_cluster_egress(spec["bytes_per_s"], rule_id)
        if kind == "allow_whitelisted":
            return allow_whitelisted(
                [self._workload_digest(wl) for wl in spec["workloads"]], rule_id
            )
        raise ParseError(f"unknown rule kind {kind!r}")

    def _build_ruleset(self, spec: dict | None, baseline: bool = False) -> Ruleset | None:
        if spec is None:
            return None
        return make_ruleset(
            version=spec.get("version", 0),
            rules=[self._build_rule(rule) for rule in spec.get("rules", [])],
            expiry=spec.get("expiry_ms"),
            baseline=baseline,
        )

    def _workload_request(self, spec: dict, path: str) -> WorkloadRequest:
        parents = tuple(
            self._resolve_receipt(ref, path + ".parents") for ref in spec.get("parents", [])
        )
        destination = spec.get("destination")
        if destination == EXTERNAL:
            destination_value: bytes | str | None = EXTERNAL
        elif destination is not None:
            destination_value = self._device_id(destination)
        else:
            destination_value = None
        return WorkloadRequest(
            op_class=spec["op_class"],
            parents=parents,
            declared_flop=spec.get("flop", 0),
            data_in=tuple(
                (data_digest(name), nbytes) for name, nbytes in spec.get("data", [])
            ),
            tags=frozenset(spec.get("tags", [])),
            destination=destination_value,
        )

    def _workload_digest(self, spec: dict) -> bytes:
        return WorkloadRequest(
            op_class=spec["op_class"],
            declared_flop=spec.get("flop", 0),
            data_in=tuple(
                (data_digest(name), nbytes) for name, nbytes in spec.get("data", [])
            ),
            tags=frozenset(spec.get("tags", [])),
        ).digest()

    def _resolve_receipt(self, ref: str, path: str) -> bytes:
        if not ref.startswith("@"):
            raise UnknownReference(f"{path}: receipt references must start with '@'")
        label = ref[1:]
        try:
            return self.receipts[label]
        except KeyError:
            raise UnknownReference(f"{path}: no receipt labelled {label!r}") from None

    # -- execution --

    def run(self) -> RunResult:
        for index, event in enumerate(self.scenario.script):
            self._dispatch(index, event)
        report = self._build_report()
        passed = all(entry["passed"] for entry in report["assertions"])
        report["summary"]["assertions_passed"] = passed
        return RunResult(
            report=report,
            passed=passed,
            network=self.net,
            devices=self.devices,
            claims=self.claims,
            labeled_payloads=self.payloads,
        )

    def _dispatch(self, index: int, event: dict) -> None:
        path = f"$.script[{index}]"
        etype = event["type"]
        record = {
            "seq": index,
            "at": event["at"],
            "type": etype,
            "label": event.get("label"),
            "device": event.get("device"),
            "outcome": "ok",
            "rule": None,
            "error": None,
            "detail": {},
        }
        handler = getattr(self, f"_on_{etype}")
        try:
            detail = handler(event, path)
            if detail:
                record["detail"] = detail
        except UnknownReference:
            raise
        except GuaranteeError as exc:
            record["outcome"] = "error"
            record["error"] = type(exc).__name__
            record["detail"] = {"message": str(exc)}
            if type(exc).__name__ == "Denied":
                record["outcome"] = "denied"
                record["rule"] = exc.rule_id
        self.trace.append(record)

    # -- event handlers --

    def _on_workload(self, event: dict, path: str) -> dict:
        proc = self._device(event["device"], path)
        request = self._workload_request(event, path)
        receipt = proc.handle_workload(request, event["at"])
        if event.get("label"):
            self.receipts[event["label"]] = receipt.receipt_id
        detail = {"receipt_id": receipt.receipt_id.hex()}
        self._cluster_sync(proc, receipt, event["at"])
        if request.destination is not None and request.parents:
            detail.update(self._ship_result(proc, request, event))
        return detail

    def _cluster_sync(self, proc: GuaranteeProcessor, receipt, at: int) -> None:
        """Propagate a fresh receipt to cluster peers, sealed per member, so
        subsequent steps elsewhere in the cluster can consume the result."""
        if proc.cluster is None or not proc.cluster.valid_at(at):
            return
        package = encode_receipt(receipt)
        for member_id in sorted(proc.cluster.members):
            if member_id == proc.identity.device_id:
                continue
            peer = self.devices.get(self.names_by_id.get(member_id, ""))
            if peer is None or peer.tampered:
                continue
            blob = seal_to(peer.identity.public_key, package, proc.identity, at)
            self.net.send(
                proc.identity.device_id,
                member_id,
                encode_sealed_blob(blob),
                at,
                kind="cluster_sync",
            )
            peer.import_receipt(receipt, origin="cluster")

    def _ship_result(self, proc: GuaranteeProcessor, request: WorkloadRequest, event: dict) -> dict:
        """An admitted transfer actually moves bytes: sealed when the
        destination is a governed device, plaintext when it leaves the
        ecosystem (which is exactly what share rules exist to forbid)."""
        model_id = request.parents[0]
        package = encode_deployment(proc.dag_view.get(model_id))
        if event.get("label"):
            self.payloads[event["label"]] = package
        if isinstance(request.destination, bytes):
            recipient_name = self.names_by_id[request.destination]
            recipient = self.devices[recipient_name]
            blob = seal_to(recipient.identity.public_key, package, proc.identity, event["at"])
            self.net.send(
                proc.identity.device_id,
                request.destination,
                encode_sealed_blob(blob),
                event["at"],
                kind="sealed_transfer",
            )
            recipient.receive_deployment(blob, event["at"])
            return {"shipped_to": recipient_name, "sealed": 1}
        self.net.send(
            proc.identity.device_id,
            EXTERNAL_NODE,
            package,
            event["at"],
            kind="external_transfer",
        )
        return {"shipped_to": EXTERNAL, "sealed": 0}

    def _on_idle(self, event: dict, path: str) -> dict:
        proc = self._device(event["device"], path)
        receipt = proc.log_idle(event["from"], event["to"], event["rate_flop_s"])
        if event.get("label"):
            self.receipts[event["label"]] = receipt.receipt_id
        return {"receipt_id": receipt.receipt_id.hex(), "flop": receipt.flop}

    def _on_total_flop(self, event: dict, path: str) -> dict:
        proc = self._device(event["device"], path)
        subject = self._resolve_receipt(event["subject"], path)
        return {"total": total_flop(proc.dag_view, subject)}

    def _on_total_data(self, event: dict, path: str) -> dict:
        proc = self._device(event["device"], path)
        subject = self._resolve_receipt(event["subject"], path)
        return {"total": total_data(proc.dag_view, subject)}

    def _on_total_flop_sum(self, event: dict, path: str) -> dict:
        combined = self._combined_dag(self.devices.keys())
        total = sum(
            total_flop(combined, self._resolve_receipt(ref, path))
            for ref in event["subjects"]
        )
        return {"total": total}

    def _register_claim(self, event: dict, claim: Claim) -> dict:
        label = event.get("label")
        if label:
            self.claims[label] = claim
        return {"kind": claim.kind, "claim": label}

    def _on_claim_flop_below(self, event: dict, path: str) -> dict:
        proc = self._device(event["device"], path)
        subject = self._resolve_receipt(event["subject"], path)
        claim = claim_flop_below(
            proc.dag_view, subject, event["threshold"], proc.identity, event["at"]
        )
        return self._register_claim(event, claim)

    def _on_claim_flop_exact(self, event: dict, path: str) -> dict:
        proc = self._device(event["device"], path)
        subject = self._resolve_receipt(event["subject"], path)
        claim = claim_flop_exact(proc.dag_view, subject, proc.identity, event["at"])
        return self._register_claim(event, claim)

    def _on_claim_data_below(self, event: dict, path: str) -> dict:
        proc = self._device(event["device"], path)
        subject = self._resolve_receipt(event["subject"], path)
        claim = claim_data_below(
            proc.dag_view, subject, event["threshold"], proc.identity, event["at"]
        )
        return self._register_claim(event, claim)

    def _on_claim_tags(self, event: dict, path: str) -> dict:
        proc = self._device(event["device"], path)
        subject = self._resolve_receipt(event["subject"], path)
        claim = query_tags(
            proc.dag_view, subject, event["tag"], event["mode"], proc.identity,
            event["at"],
        )
        return self._register_claim(event, claim)

    def _on_sharing_claim(self, event: dict, path: str) -> dict:
        proc = self._device(event["device"], path)
        result = self._resolve_receipt(event["result"], path)
        claim = sharing_claim(proc.sharing_log, result, proc.identity, event["at"])
        detail = self._register_claim(event, claim)
        detail["recipients"] = list(claim.param("recipients"))
        return detail

    def _combined_dag(self, device_names) -> ReceiptDag:
        combined = ReceiptDag()
        for name in sorted(device_names):
            proc = self.devices[name]
            for receipt_id in sorted(proc.dag_view.receipts):
                combined.add(proc.dag_view.receipts[receipt_id], declare_missing_parents=True)
        return combined

    def _on_accounting_audit(self, event: dict, path: str) -> dict:
        names = event["devices"]
        for name in names:
            self._device(name, path)
        combined = self._combined_dag(names)
        capacity = event["capacity_flop_s"]
        if isinstance(capacity, dict):
            capacity = {self._device_id(name): rate for name, rate in capacity.items()}
        attester = self._device(event.get("attester", names[0]), path).identity
        claim = compute_accounting(
            combined,
            [self._device_id(name) for name in names],
            (event["period"][0], event["period"][1]),
            capacity,
            attester,
            now=event["at"],
            require_no_ai=event.get("no_ai", False),
            tolerance=event.get("tolerance", 0),
        )
        return self._register_claim(event, claim)

    def _on_update_offer(self, event: dict, path: str) -> dict:
        proc = self._device(event["device"], path)
        spec = dict(event["ruleset"])
        spec.setdefault("version", event.get("version"))
        ruleset = self._build_ruleset(spec)
        signers = [self._signer(name, path) for name in event["signers"]]
        update = make_update(ruleset, signers, now=event["at"])
        proc.install_update(update, event["at"])
        return {"version": proc.ruleset_version}

    def _on_license_grant(self, event: dict, path: str) -> dict:
        proc = self._device(event["device"], path)
        scope = event["scope"]
        if isinstance(scope, dict):
            scope = self._workload_digest(scope["workload"])
        subject = event.get("subject", "*")
        if subject != "*":
            subject = self._device_id(subject)
        issuers = [self._signer(name, path) for name in event["issuers"]]
        signers = [self._signer(name, path) for name in event.get("signers", event["issuers"])]
        lic = make_license(
            issuers,
            scope,
            subject,
            event["not_before"],
            event["not_after"],
            event.get("threshold", len(issuers)),
            signers=signers,
            now=event["at"],
        )
        proc.grant_license(lic)
        return {"license_id": lic.license_id().hex()}

    def _on_tamper(self, event: dict, path: str) -> dict:
        proc = self._device(event["device"], path)
        brick = event.get("brick", False)
        proc.tamper_event(brick=brick)
        self.net.invalidate_clusters_of(proc.identity.device_id, event["at"])
        return {"life_state": proc.identity.life_state.value}

    def _on_partition(self, event: dict, path: str) -> dict:
        a = self._device_id(event["a"])
        b = self._device_id(event["b"])
        self.net.set_partition(a, b, event.get("severed", True))
        return {"severed": 1 if event.get("severed", True) else 0}

    def _on_location_check(self, event: dict, path: str) -> dict:
        proc = self._device(event["device"], path)
        landmark = self._device_id(event["landmark"])
        enforce = event.get("enforce", True)
        try:
            claim = verify_location(
                self.net,
                proc.identity.device_id,
                landmark,
                event["radius_km"],
                mode=event.get("mode", "landmark_initiated"),
                added_delay_ms=event.get("added_delay_ms", 0),
                at=event["at"],
            )
        except GuaranteeError:
            if enforce:
                enforce_location_restriction(proc, None)
            raise
        if enforce:
            enforce_location_restriction(proc, claim)
        if event.get("label"):
            attester_name = self.names_by_id[claim.attestation.signer]
            self.claims[event["label"]] = claim.to_claim(
                self._identity_for(attester_name), event["radius_km"], event["at"]
            )
        return {
            "rtt_ms": claim.rtt_ms,
            "bound_m": claim.bound_m,
            "region_ok": 1 if claim.region_ok else 0,
            "restricted": 1 if proc.location_restricted else 0,
        }

    def _on_deploy(self, event: dict, path: str) -> dict:
        proc = self._device(event["device"], path)
        model = self._resolve_receipt(event["model"], path)
        recipients = [self._device_id(name) for name in event["recipients"]]
        if event.get("label"):
            self.payloads[event["label"]] = encode_deployment(proc.dag_view.get(model))
        blobs, _receipts, claim = proc.controlled_deploy(
            model,
            recipients,
            event.get("tags", []),
            self._key_directory(),
            event["at"],
        )
        for recipient_id, blob in blobs.items():
            recipient = self.devices[self.names_by_id[recipient_id]]
            self.net.send(
                proc.identity.device_id,
                recipient_id,
                encode_sealed_blob(blob),
                event["at"],
                kind="deployment",
            )
            recipient.receive_deployment(blob, event["at"])
        detail = self._register_claim(event, claim)
        detail["recipients"] = sorted(self.names_by_id[r] for r in blobs)
        return detail

    def _on_private_eval(self, event: dict, path: str) -> dict:
        proc = self._device(event["device"], path)
        model = self._resolve_receipt(event["model"], path)
        evaluator = self._signer(event["evaluator"], path)
        scores = {
            self._resolve_receipt(ref, path).hex(): score
            for ref, score in event.get("scores", {}).items()
        }
        suite_bytes = json.dumps(
            {"scores": scores, "default": event.get("default", 0)},
            sort_keys=True,
        ).encode("utf-8")
        if event.get("label"):
            self.payloads[event["label"]] = suite_bytes
        sealed_suite = seal_to(
            proc.identity.public_key, suite_bytes, evaluator, event["at"]
        )
        self.net.send(
            evaluator.device_id,
            proc.identity.device_id,
            encode_sealed_blob(sealed_suite),
            event["at"],
            kind="eval_suite",
        )
        result, sealed_result = proc.run_private_eval(
            model,
            sealed_suite,
            evaluator.public_key,
            event["at"],
            declared_flop=event.get("flop", 0),
        )
        self.net.send(
            proc.identity.device_id,
            evaluator.device_id,
            encode_sealed_blob(sealed_result),
            event["at"],
            kind="eval_result",
        )
        return {"score": result.score, "suite_digest": result.suite_digest.hex()}

    def _on_form_cluster(self, event: dict, path: str) -> dict:
        members = [self._device_id(name) for name in event["members"]]
        config = form_cluster(self.net, members, event["egress_cap_bytes_s"], event["at"])
        if event.get("label"):
            self.clusters[event["label"]] = config
        for name in event["members"]:
            self.devices[name].cluster = config
        return {
            "cluster_id": config.cluster_id().hex(),
            "members": len(config.members),
        }

    def _on_verify_cluster(self, event: dict, path: str) -> dict:
        ref = event["cluster"]
        if not ref.startswith("@") or ref[1:] not in self.clusters:
            raise UnknownReference(f"{path}: no cluster labelled {ref!r}")
        config = self.clusters[ref[1:]]
        attester = self._device(event["attester"], path)
        claim = verify_cluster_constraints(
            self.net,
            config,
            event["max_members"],
            event["max_egress_bytes_s"],
            attester.identity,
            event["at"],
        )
        for proc in self.devices.values():
            if proc.cluster is config:
                proc.cluster_claim = claim
        return self._register_claim(event, claim)

    def _on_commit_binding(self, event: dict, path: str) -> dict:
        proc = self._device(event["device"], path)
        ruleset = self._build_ruleset(event["ruleset"])
        claim = proc.commit_binding(
            ruleset, event["irrevocable_until"], proc.identity, event["at"]
        )
        return self._register_claim(event, claim)

    def _on_remove_commitment(self, event: dict, path: str) -> dict:
        proc = self._device(event["device"], path)
        proc.remove_commitment(event["at"])
        return {"binding": 0 if proc.binding is None else 1}

    def _on_verify_dag(self, event: dict, path: str) -> dict:
        proc = self._device(event["device"], path)
        verify_dag(proc.dag_view, self._key_directory())
        return {"receipts": len(proc.dag_view.receipts)}

    # -- report --

    def _detect_similar_runs(self) -> dict:
        """Heuristic for split training runs: several lineages training at
        the same time with identical tag signatures. Receipts cannot link
        independently trained modules of one system, so per-lineage claims
        may legitimately undercount a joint capability; this flag is the
        report's way of surfacing the pattern for human review."""
        combined = self._combined_dag(self.devices.keys())
        lineages: dict[bytes, dict] = {}
        for receipt in combined.receipts.values():
            if receipt.op_class != "training_step":
                continue
            for root in combined.roots_of(receipt.receipt_id):
                info = lineages.setdefault(
                    root, {"tags": set(), "start": None, "end": None}
                )
                info["tags"] |= receipt.tags
                start, end = receipt.interval
                info["start"] = start if info["start"] is None else min(info["start"], start)
                info["end"] = end if info["end"] is None else max(info["end"], end)
        groups: dict[frozenset[str], list[bytes]] = {}
        for root, info in lineages.items():
            signature = frozenset(info["tags"]) - {"random_init"}
            if signature:
                groups.setdefault(signature, []).append(root)
        for signature, roots in sorted(groups.items(), key=lambda kv: sorted(kv[0])):
            if len(roots) < SIMILAR_RUNS_MIN:
                continue
            latest_start = max(lineages[r]["start"] for r in roots)
            earliest_end = min(lineages[r]["end"] for r in roots)
            if latest_start <= earliest_end:
                return {
                    "detected": True,
                    "count": len(roots),
                    "tags": sorted(signature),
                    "lineages": sorted(r.hex() for r in roots),
                }
        return {"detected": False, "count": 0, "tags": [], "lineages": []}

    def _claim_entries(self) -> list[dict]:
        entries = []
        for label in sorted(self.claims):
            claim = self.claims[label]
            public_key = None
            if claim.attesters:
                public_key = self._public_key(claim.attesters[0])
            verified = bool(public_key) and verify_claim(claim, public_key)
            entry = {"label": label, "verified": verified}
            entry.update(claim_to_json(claim))
            entry["encoded_hex"] = encode_claim(claim).hex()
            entries.append(entry)
        return entries

    def _check_assertions(self) -> list[dict]:
        results = []
        for assertion in self.scenario.assertions:
            passed, observed = self._check_assertion(assertion)
            results.append(
                {"assertion": assertion, "passed": passed, "observed": observed}
            )
        return results

    def _trace_for_label(self, label: str):
        for record in self.trace:
            if record["label"] == label:
                return record
        return None

    def _resolve_expected(self, value):
        """Expected values may reference world identities as "@id:<name>",
        resolved to the hex device id, so fixtures stay seed-independent."""
        if isinstance(value, str) and value.startswith("@id:"):
            return self._device_id(value[4:]).hex()
        if isinstance(value, list):
            return [self._resolve_expected(v) for v in value]
        if isinstance(value, dict):
            return {k: self._resolve_expected(v) for k, v in value.items()}
        return value

    def _check_assertion(self, assertion: dict) -> tuple[bool, object]:
        if "event" in assertion:
            record = self._trace_for_label(assertion["event"])
            if record is None:
                return False, "no such event label"
            if "outcome" in assertion and record["outcome"] != assertion["outcome"]:
                return False, record["outcome"]
            if "rule" in assertion and record["rule"] != assertion["rule"]:
                return False, record["rule"]
            if "error" in assertion and record["error"] != assertion["error"]:
                return False, record["error"]
            if "detail" in assertion:
                for key, expected in assertion["detail"].items():
                    if record["detail"].get(key) != self._resolve_expected(expected):
                        return False, {key: record["detail"].get(key)}
            return True, record["outcome"]
        if "claim" in assertion:
            label = assertion["claim"]
            if label not in self.claims:
                if assertion.get("verifies") is False:
                    return True, "absent"
                return False, "no such claim label"
            claim = self.claims[label]
            public_key = self._public_key(claim.attesters[0]) if claim.attesters else None
            verified = bool(public_key) and verify_claim(claim, public_key)
            if "verifies" in assertion and verified != assertion["verifies"]:
                return False, verified
            if "kind" in assertion and claim.kind != assertion["kind"]:
                return False, claim.kind
            if "params" in assertion:
                actual = claim_to_json(claim)["params"]
                for key, expected in assertion["params"].items():
                    if actual.get(key) != self._resolve_expected(expected):
                        return False, {key: actual.get(key)}
            return True, "verified" if verified else "present"
        if "summary" in assertion:
            node = self._summary
            for part in assertion["summary"].split("."):
                if not isinstance(node, dict) or part not in node:
                    return False, f"no summary path {assertion['summary']}"
                node = node[part]
            return node == assertion["equals"], node
        if "wire_excludes" in assertion:
            label = assertion["wire_excludes"]
            plaintext = self.payloads.get(label)
            if plaintext is None:
                return False, "no payload recorded for label"
            for payload in self.net.wire_payloads():
                if plaintext in payload:
                    return False, "plaintext found on the wire"
            return True, "clean"
        return False, "unrecognised assertion"

    def _build_report(self) -> dict:
        self._summary = {
            "events": len(self.trace),
            "allowed": sum(1 for r in self.trace if r["outcome"] == "ok"),
            "denied": sum(1 for r in self.trace if r["outcome"] == "denied"),
            "errors": sum(1 for r in self.trace if r["outcome"] == "error"),
            "claims": len(self.claims),
            "messages": len(self.net.traffic),
            "wire_bytes": sum(len(r.payload) for r in self.net.traffic),
            "concurrent_similar_runs": self._detect_similar_runs(),
        }
        assertions = self._check_assertions()
        return {
            "schema": REPORT_SCHEMA,
            "scenario": self.scenario.name,
            "seed": self.seed,
            "description": self.scenario.description,
            "devices": {
                name: proc.identity.device_id.hex()
                for name, proc in sorted(self.devices.items())
            },
            "trace": self.trace,
            "claims": self._claim_entries(),
            "assertions": assertions,
            "summary": self._summary,
        }


def render_report(report: dict) -> bytes:
    return (json.dumps(report, sort_keys=True, indent=2) + "\n").encode("utf-8")


def run_scenario(
    scenario: Scenario,
    seed: int | None = None,
    out_path: str | Path | None = None,
    export_dir: str | Path | None = None,
) -> RunResult:
    result = ScenarioRunner(scenario, seed=seed).run()
    if out_path is not None:
        Path(out_path).write_bytes(render_report(result.report))
    if export_dir is not None:
        export_dir = Path(export_dir)
        export_dir.mkdir(parents=True, exist_ok=True)
        for label in sorted(result.claims):
            (export_dir / f"{label}.claim").write_bytes(
                encode_claim(result.claims[label])
            )
    return result
