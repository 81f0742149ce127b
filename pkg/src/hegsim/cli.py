"""Command-line entry points.

    hegsim run <scenario.json> [--out report.json] [--seed N]
                               [--export-claims DIR]
    hegsim verify <claim.bin> --trust-roots roots.json
    hegsim list-scenarios

Exit codes: 0 on success, 1 on assertion failure or invalid claim,
2 on input errors.
"""
from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

from .encoding import digest
from .errors import GuaranteeError, ParseError, UnknownReference
from .identity import verify_attestation
from .receipts import claim_to_json, decode_claim
from .runner import render_report, run_scenario
from .scenario import load_scenario

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INPUT = 2


def bundled_scenarios() -> dict[str, Path]:
    root = resources.files("hegsim") / "scenarios"
    found = {}
    for entry in sorted(root.iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".json"):
            found[entry.name[:-5]] = Path(str(entry))
    return found


def _resolve_scenario_path(ref: str) -> Path:
    path = Path(ref)
    if path.exists():
        return path
    bundled = bundled_scenarios()
    if ref in bundled:
        return bundled[ref]
    raise ParseError(f"no scenario file or bundled scenario named {ref!r}")


def cmd_run(args: argparse.Namespace) -> int:
    try:
        path = _resolve_scenario_path(args.scenario)
        scenario = load_scenario(path)
        result = run_scenario(
            scenario,
            seed=args.seed,
            out_path=args.out,
            export_dir=args.export_claims,
        )
    except (ParseError, UnknownReference) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if args.out is None:
        sys.stdout.buffer.write(render_report(result.report))
    summary = result.report["summary"]
    status = "PASS" if result.passed else "FAIL"
    print(
        f"{status} {result.report['scenario']}: {summary['events']} events, "
        f"{summary['denied']} denied, {summary['errors']} errors, "
        f"{summary['claims']} claims",
        file=sys.stderr,
    )
    for entry in result.report["assertions"]:
        if not entry["passed"]:
            print(
                f"  assertion failed: {json.dumps(entry['assertion'], sort_keys=True)}"
                f" (observed: {entry['observed']})",
                file=sys.stderr,
            )
    return EXIT_OK if result.passed else EXIT_FAILED


def load_trust_roots(path: str | Path) -> dict[bytes, bytes]:
    """Trust roots file: {"trusted_keys": ["<hex public key>", ...]}.

    Returns a device-id -> public-key map; ids are recomputed from the keys,
    never trusted from the file.
    """
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot load trust roots: {exc}") from exc
    if not isinstance(raw, dict) or not isinstance(raw.get("trusted_keys"), list):
        raise ParseError('trust roots must contain a "trusted_keys" list')
    roots: dict[bytes, bytes] = {}
    for i, entry in enumerate(raw["trusted_keys"]):
        try:
            key = bytes.fromhex(entry)
        except (TypeError, ValueError) as exc:
            raise ParseError(f"trusted_keys[{i}]: not hex") from exc
        if len(key) != 64:
            raise ParseError(f"trusted_keys[{i}]: expected 64 bytes, got {len(key)}")
        roots[digest(key)] = key
    return roots


def verify_claim_file(claim_path: str | Path, roots_path: str | Path) -> tuple[bool, str]:
    """Fully offline claim verification against a set of trusted keys."""
    try:
        data = Path(claim_path).read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read claim: {exc}") from exc
    roots = load_trust_roots(roots_path)
    try:
        claim = decode_claim(data)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ParseError(f"claim does not decode: {exc}") from exc
    signer = claim.attestation.signer
    if signer not in claim.attesters:
        return False, "invalid(signer_not_listed)"
    public_key = roots.get(signer)
    if public_key is None:
        return False, "invalid(untrusted_signer)"
    if claim.attestation.payload != claim.body():
        return False, "invalid(bad_signature)"
    if not verify_attestation(claim.attestation, public_key):
        return False, "invalid(bad_signature)"
    return True, "valid"


def cmd_verify(args: argparse.Namespace) -> int:
    try:
        ok, verdict = verify_claim_file(args.claim, args.trust_roots)
    except (ParseError, GuaranteeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(verdict)
    if ok and args.show:
        data = Path(args.claim).read_bytes()
        print(json.dumps(claim_to_json(decode_claim(data)), indent=2, sort_keys=True))
    return EXIT_OK if ok else EXIT_FAILED


def cmd_list_scenarios(_args: argparse.Namespace) -> int:
    for name, path in bundled_scenarios().items():
        description = ""
        try:
            description = json.loads(path.read_text())["description"]
        except (OSError, KeyError, json.JSONDecodeError):
            pass
        print(f"{name}: {description}" if description else name)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hegsim",
        description="Deterministic simulator for hardware-enforced compute governance.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_parser = sub.add_parser("run", help="run a scenario and check its assertions")
    run_parser.add_argument("scenario", help="scenario file path or bundled scenario name")
    run_parser.add_argument("--out", help="write the report JSON here")
    run_parser.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run_parser.add_argument(
        "--export-claims", help="directory to write each labelled claim's canonical bytes"
    )
    run_parser.set_defaults(func=cmd_run)

    verify_parser = sub.add_parser(
        "verify", help="verify an exported claim offline against trusted keys"
    )
    verify_parser.add_argument("claim", help="canonical claim bytes (.claim file)")
    verify_parser.add_argument("--trust-roots", required=True, help="trusted keys JSON")
    verify_parser.add_argument("--show", action="store_true", help="print the decoded claim")
    verify_parser.set_defaults(func=cmd_verify)

    list_parser = sub.add_parser("list-scenarios", help="list bundled scenarios")
    list_parser.set_defaults(func=cmd_list_scenarios)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
