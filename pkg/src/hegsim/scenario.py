"""Scenario file loading and validation.

Scenarios are JSON with a versioned `schema` field: device and authority
declarations, a network topology, a time-ordered event script, and the
assertions the run must satisfy. Validation errors name the offending
field path.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .encoding import digest
from .errors import ParseError, UnknownReference

SCHEMA_VERSION = 1

EVENT_TYPES = frozenset({
    "workload",
    "idle",
    "total_flop",
    "total_data",
    "total_flop_sum",
    "claim_flop_below",
    "claim_flop_exact",
    "claim_data_below",
    "claim_tags",
    "sharing_claim",
    "accounting_audit",
    "update_offer",
    "license_grant",
    "tamper",
    "partition",
    "location_check",
    "deploy",
    "private_eval",
    "form_cluster",
    "verify_cluster",
    "commit_binding",
    "remove_commitment",
    "verify_dag",
})

RULE_SPEC_KINDS = frozenset({
    "max_training_flop",
    "require_license",
    "share_only_to",
    "require_eval_every",
    "controlled_deployment",
    "max_cluster_egress",
    "allow_whitelisted",
})


@dataclass
class Scenario:
    name: str
    seed: int
    description: str
    network: dict
    authorities: list[dict]
    devices: list[dict]
    script: list[dict]
    assertions: list[dict]
    source_path: Path | None = None
    device_names: set[str] = field(default_factory=set)
    authority_names: set[str] = field(default_factory=set)


def data_digest(name_or_hex: str) -> bytes:
    """Resolve a scenario data reference to a 32-byte digest.

    A 64-character hex string is taken literally; anything else is treated
    as a symbolic dataset name and hashed.
    """
    if len(name_or_hex) == 64:
        try:
            return bytes.fromhex(name_or_hex)
        except ValueError:
            pass
    return digest(b"hegsim/data:" + name_or_hex.encode("utf-8"))


def _fail(path: str, message: str):
    raise ParseError(f"{path}: {message}")


def _expect(condition: bool, path: str, message: str) -> None:
    if not condition:
        _fail(path, message)


def _expect_int(value, path: str, minimum: int | None = None) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        _fail(path, f"expected an integer, got {type(value).__name__}")
    if minimum is not None and value < minimum:
        _fail(path, f"must be >= {minimum}")
    return value


def _expect_str(value, path: str) -> str:
    if not isinstance(value, str):
        _fail(path, f"expected a string, got {type(value).__name__}")
    return value


def _expect_list(value, path: str) -> list:
    if not isinstance(value, list):
        _fail(path, f"expected a list, got {type(value).__name__}")
    return value


def _expect_dict(value, path: str) -> dict:
    if not isinstance(value, dict):
        _fail(path, f"expected an object, got {type(value).__name__}")
    return value


def _validate_workload_spec(spec: dict, path: str, allow_parents: bool) -> None:
    _expect_dict(spec, path)
    _expect_str(spec.get("op_class", None) or "", path + ".op_class")
    _expect(bool(spec.get("op_class")), path + ".op_class", "required")
    if "flop" in spec:
        _expect_int(spec["flop"], path + ".flop", minimum=0)
    for i, entry in enumerate(_expect_list(spec.get("data", []), path + ".data")):
        entry_path = f"{path}.data[{i}]"
        _expect_list(entry, entry_path)
        _expect(len(entry) == 2, entry_path, "expected [name_or_hex, byte_count]")
        _expect_str(entry[0], entry_path + "[0]")
        _expect_int(entry[1], entry_path + "[1]", minimum=0)
    _expect_list(spec.get("tags", []), path + ".tags")
    if not allow_parents and spec.get("parents"):
        _fail(path + ".parents", "parents are not allowed in workload templates")
    if "parents" in spec:
        _expect_list(spec["parents"], path + ".parents")


def _validate_rule_spec(spec: dict, path: str) -> None:
    _expect_dict(spec, path)
    kind = _expect_str(spec.get("kind", ""), path + ".kind")
    _expect(kind in RULE_SPEC_KINDS, path + ".kind", f"unknown rule kind {kind!r}")
    if kind == "max_training_flop":
        _expect_int(spec.get("limit"), path + ".limit", minimum=0)
    elif kind == "require_license":
        _expect_str(spec.get("action_class", ""), path + ".action_class")
        _expect(bool(spec.get("action_class")), path + ".action_class", "required")
    elif kind == "share_only_to":
        has_mode = spec.get("mode") == "governed_only"
        has_devices = bool(spec.get("devices"))
        _expect(
            has_mode != has_devices,
            path,
            'needs either "mode": "governed_only" or a non-empty "devices" list',
        )
    elif kind == "require_eval_every":
        _expect_int(spec.get("flop_interval"), path + ".flop_interval", minimum=1)
    elif kind == "controlled_deployment":
        _expect_int(spec.get("min_flop"), path + ".min_flop", minimum=0)
        approved = _expect_list(spec.get("approved"), path + ".approved")
        _expect(bool(approved), path + ".approved", "must be non-empty")
        _expect_list(spec.get("required_tags", []), path + ".required_tags")
    elif kind == "max_cluster_egress":
        _expect_int(spec.get("bytes_per_s"), path + ".bytes_per_s", minimum=0)
    elif kind == "allow_whitelisted":
        workloads = _expect_list(spec.get("workloads"), path + ".workloads")
        for i, wl in enumerate(workloads):
            _validate_workload_spec(wl, f"{path}.workloads[{i}]", allow_parents=False)


def _validate_ruleset_spec(spec: dict, path: str) -> None:
    _expect_dict(spec, path)
    _expect_int(spec.get("version", 0), path + ".version", minimum=0)
    if spec.get("expiry_ms") is not None:
        _expect_int(spec["expiry_ms"], path + ".expiry_ms", minimum=0)
    for i, rule in enumerate(_expect_list(spec.get("rules", []), path + ".rules")):
        _validate_rule_spec(rule, f"{path}.rules[{i}]")


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        raw_text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read scenario file: {exc}") from exc
    try:
        raw = json.loads(raw_text)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"{path.name}: invalid JSON at line {exc.lineno}, column {exc.colno}: "
            f"{exc.msg}"
        ) from exc
    scenario = parse_scenario(raw)
    scenario.source_path = path
    return scenario


def parse_scenario(raw: dict) -> Scenario:
    _expect_dict(raw, "$")
    schema = raw.get("schema")
    _expect(
        schema == SCHEMA_VERSION,
        "$.schema",
        f"unsupported schema {schema!r}, expected {SCHEMA_VERSION}",
    )
    name = _expect_str(raw.get("name", ""), "$.name")
    _expect(bool(name), "$.name", "required")
    seed = _expect_int(raw.get("seed"), "$.seed", minimum=0)
    network = _expect_dict(raw.get("network", {}), "$.network")
    if "signal_speed_km_s" in network:
        _expect_int(network["signal_speed_km_s"], "$.network.signal_speed_km_s", minimum=1)

    authorities = _expect_list(raw.get("authorities", []), "$.authorities")
    authority_names: set[str] = set()
    for i, authority in enumerate(authorities):
        apath = f"$.authorities[{i}]"
        _expect_dict(authority, apath)
        aname = _expect_str(authority.get("name", ""), apath + ".name")
        _expect(bool(aname), apath + ".name", "required")
        _expect(aname not in authority_names, apath + ".name", "duplicate name")
        authority_names.add(aname)

    devices = _expect_list(raw.get("devices", []), "$.devices")
    _expect(bool(devices), "$.devices", "at least one device is required")
    device_names: set[str] = set()
    for i, device in enumerate(devices):
        dpath = f"$.devices[{i}]"
        _expect_dict(device, dpath)
        dname = _expect_str(device.get("name", ""), dpath + ".name")
        _expect(bool(dname), dpath + ".name", "required")
        _expect(dname not in device_names, dpath + ".name", "duplicate name")
        _expect(dname not in authority_names, dpath + ".name", "name collides with an authority")
        device_names.add(dname)
        position = _expect_list(device.get("position", [0, 0]), dpath + ".position")
        _expect(len(position) == 2, dpath + ".position", "expected [x, y]")
        for coord in position:
            _expect(
                isinstance(coord, (int, float)) and not isinstance(coord, bool),
                dpath + ".position",
                "coordinates must be numbers",
            )
        if "quorum" in device:
            qpath = dpath + ".quorum"
            quorum = _expect_dict(device["quorum"], qpath)
            signers = _expect_list(quorum.get("signers"), qpath + ".signers")
            _expect(bool(signers), qpath + ".signers", "must be non-empty")
            for signer in signers:
                _expect(
                    signer in authority_names,
                    qpath + ".signers",
                    f"unknown authority {signer!r}",
                )
            threshold = _expect_int(quorum.get("threshold"), qpath + ".threshold", minimum=1)
            _expect(
                threshold <= len(signers),
                qpath + ".threshold",
                "threshold exceeds signer count",
            )
        if "ruleset" in device and device["ruleset"] is not None:
            _validate_ruleset_spec(device["ruleset"], dpath + ".ruleset")
        if "baseline" in device and device["baseline"] is not None:
            _validate_ruleset_spec(device["baseline"], dpath + ".baseline")
        if "update_interval_ms" in device:
            _expect_int(device["update_interval_ms"], dpath + ".update_interval_ms", minimum=1)

    script = _expect_list(raw.get("script", []), "$.script")
    last_at = 0
    labels: set[str] = set()
    for i, event in enumerate(script):
        epath = f"$.script[{i}]"
        _expect_dict(event, epath)
        at = _expect_int(event.get("at"), epath + ".at", minimum=0)
        _expect(at >= last_at, epath + ".at", "script timestamps must be non-decreasing")
        last_at = at
        etype = _expect_str(event.get("type", ""), epath + ".type")
        _expect(etype in EVENT_TYPES, epath + ".type", f"unknown event type {etype!r}")
        label = event.get("label")
        if label is not None:
            _expect_str(label, epath + ".label")
            _expect(label not in labels, epath + ".label", "duplicate label")
            labels.add(label)
        if etype == "workload":
            _validate_workload_spec(event, epath, allow_parents=True)
        if etype in ("update_offer", "commit_binding"):
            _validate_ruleset_spec(event.get("ruleset", {}), epath + ".ruleset")

    assertions = _expect_list(raw.get("assertions", []), "$.assertions")
    for i, assertion in enumerate(assertions):
        _expect_dict(assertion, f"$.assertions[{i}]")

    return Scenario(
        name=name,
        seed=seed,
        description=raw.get("description", ""),
        network=network,
        authorities=authorities,
        devices=devices,
        script=script,
        assertions=assertions,
        device_names=device_names,
        authority_names=authority_names,
    )


def resolve_name(scenario: Scenario, name: str, path: str) -> str:
    if name in scenario.device_names or name in scenario.authority_names:
        return name
    raise UnknownReference(f"{path}: unknown device or authority {name!r}")
