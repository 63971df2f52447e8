"""Command-line entry point: ``streamkv simulate|compare|heatmap|profile|schema``.

Configuration is a JSON document (see ``streamkv schema``) with ``model``,
``policy``, ``chunks`` and optional ``seeds``, ``policies``, ``rollout``,
``workers`` and ``out`` keys. Unknown keys anywhere are rejected. Individual
values can be overridden with ``--set section.key=value`` where the value is
parsed as JSON when possible.

Exit codes: 0 success, 2 configuration or input error, 3 runtime invariant
violation. Errors are reported on stderr as a single JSON object.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import jsonschema

from .cache import CachePolicyConfig, HeadMode, Policy, QueryMode, ScoreMode, SinkAlignment
from .errors import CacheError, ConfigError, TriggerError
from .simulator import (STREAM_KINDS, SUMMARY_FIELDS, RolloutTrace, StreamModel,
                        compare_policies, rollout, rows_to_csv, selection_heatmap)

logger = logging.getLogger("streamkv")

LOG_ENV = "STREAMKV_LOG_LEVEL"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _enum(e) -> dict:
    return {"type": "string", "enum": [m.value for m in e]}


_INT = {"type": "integer"}
_NUM = {"type": "number"}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "streamkv run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"type": "string", "enum": list(STREAM_KINDS)},
                "seed": {**_INT, "minimum": 0},
                "tokens_per_frame": {**_INT, "minimum": 1},
                "head_dim": {**_INT, "minimum": 2},
                "num_heads": {**_INT, "minimum": 1},
                "num_layers": {**_INT, "minimum": 1},
                "anchor_count": {**_INT, "minimum": 0},
                "anchor_gain": _NUM,
                "anchor_frames": {"type": "array", "items": _INT, "minItems": 2, "maxItems": 2},
                "drift_rate": _NUM,
                "drift_gain": _NUM,
                "query_alignment": _NUM,
                "jitter_scale": _NUM,
                "rope_base": _NUM,
                "dim_split": {"type": ["array", "null"], "items": _INT,
                              "minItems": 3, "maxItems": 3},
            },
        },
        "policy": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sink_frames": _INT,
                "budget_frames": _INT,
                "recent_frames": _INT,
                "max_window_frames": _INT,
                "tokens_per_frame": _INT,
                "chunk_frames": _INT,
                "policy": _enum(Policy),
                "query_mode": _enum(QueryMode),
                "score_mode": _enum(ScoreMode),
                "head_mode": _enum(HeadMode),
                "sink_alignment": _enum(SinkAlignment),
            },
        },
        "chunks": {**_INT, "minimum": 1},
        "seeds": {"type": "array", "items": {**_INT, "minimum": 0}, "minItems": 1},
        "policies": {"type": "array", "items": _enum(Policy), "minItems": 1},
        "rollout": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "track_mass": {"type": "boolean"},
                "probe_queries": {**_INT, "minimum": 1},
                "mass_every": {**_INT, "minimum": 1},
            },
        },
        "workers": {**_INT, "minimum": 1},
        "out": {"type": "string"},
    },
}

DEFAULT_CHUNKS = 320


class RunConfig:
    """Validated run configuration built from a JSON document."""

    def __init__(self, data: dict):
        try:
            jsonschema.validate(data, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"{where}: {exc.message}") from None
        self.raw = data
        model = dict(data.get("model", {}))
        policy = dict(data.get("policy", {}))
        self.model = StreamModel.from_dict(model)
        policy.setdefault("tokens_per_frame", self.model.tokens_per_frame)
        self.policy = CachePolicyConfig.from_dict(policy)
        if self.policy.tokens_per_frame != self.model.tokens_per_frame:
            raise ConfigError(
                f"policy.tokens_per_frame={self.policy.tokens_per_frame} != "
                f"model.tokens_per_frame={self.model.tokens_per_frame}")
        self.chunks = int(data.get("chunks", DEFAULT_CHUNKS))
        self.seeds = [int(s) for s in data.get("seeds", [self.model.seed])]
        self.policies = [Policy(p) for p in data.get("policies", [])]
        self.rollout_kw = dict(data.get("rollout", {}))
        self.workers = int(data.get("workers", 1))
        self.out = data.get("out")

    def policy_configs(self) -> list[CachePolicyConfig]:
        names = self.policies or list(Policy)
        return [replace(self.policy, policy=p) for p in names]


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b=value`` overrides to a copy of ``data``."""
    out = copy.deepcopy(data)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        parts = key.split(".")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = _parse_value(value)
    return out


def load_config(path: str | None, overrides: list[str], seed: int | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
    data = apply_overrides(data, overrides)
    if seed is not None:
        data.setdefault("model", {})["seed"] = seed
        data["seeds"] = [seed]
    return RunConfig(data)


def atomic_write(path: Path, text: str) -> None:
    """Write ``text`` to ``path`` via a temp file in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _write_all(outputs: dict[Path, str]) -> None:
    # everything is rendered before the first rename
    for path, text in outputs.items():
        atomic_write(path, text if text.endswith("\n") else text + "\n")


def _out_dir(args, cfg: RunConfig | None = None) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.out:
        return Path(cfg.out)
    return Path(".")


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    out = _out_dir(args, cfg)
    logger.info("simulate policy=%s chunks=%d seeds=%s",
                cfg.policy.policy.value, cfg.chunks, cfg.seeds)
    traces = _map(lambda s: rollout(replace(cfg.model, seed=s), cfg.policy, cfg.chunks,
                                    **cfg.rollout_kw),
                  cfg.seeds, cfg.workers)
    rows = [{k: t.summary[k] for k in SUMMARY_FIELDS} for t in traces]
    _write_all({
        out / "trace.jsonl": "".join(t.to_jsonl() for t in traces),
        out / "summary.csv": rows_to_csv(rows, SUMMARY_FIELDS),
    })
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    if args.policies:
        try:
            cfg.policies = [Policy(p.strip()) for p in args.policies.split(",") if p.strip()]
        except ValueError as exc:
            valid = ", ".join(p.value for p in Policy)
            raise ConfigError(f"{exc}; valid: {valid}") from None
    out = _out_dir(args, cfg)
    cfgs = cfg.policy_configs()
    logger.info("compare policies=%s seeds=%s", [c.policy.value for c in cfgs], cfg.seeds)
    rows = compare_policies(cfg.model, cfgs, cfg.chunks, cfg.seeds,
                            workers=cfg.workers, **cfg.rollout_kw)
    _write_all({out / "policies.csv": rows_to_csv(rows)})
    return EXIT_OK


def _read_traces(path: str) -> list[RolloutTrace]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read trace {path}: {exc.strerror}") from None
    try:
        traces = RolloutTrace.from_jsonl(text)
    except ValueError as exc:
        raise ConfigError(f"trace {path}: {exc}") from None
    if not traces:
        raise ConfigError(f"trace {path} holds no rollout")
    for t in traces:
        if "heatmap" not in t.header:
            raise ConfigError(f"trace {path}: header lacks heatmap metadata")
    return traces


def cmd_heatmap(args) -> int:
    traces = _read_traces(args.trace)
    hm = selection_heatmap(traces)
    out = _out_dir(args)
    meta = {
        "slots": int(hm.counts.size),
        "sink_boundary": hm.sink_boundary,
        "candidate_end": hm.candidate_end,
        "recent_start": hm.recent_start,
        "compressions": sum(len(t.compressions) for t in traces),
        "total_selections": int(hm.counts.sum()),
    }
    _write_all({
        out / "heatmap.csv": hm.to_csv(),
        out / "heatmap_meta.json": json.dumps(meta, indent=2, sort_keys=True),
    })
    return EXIT_OK


def cmd_profile(args) -> int:
    traces = _read_traces(args.trace)
    trace = traces[args.index]
    for prof in trace.summary.get("profiles", []):
        if prof["layer"] == args.layer and prof["head"] == args.head:
            break
    else:
        raise ConfigError(f"no profile for layer={args.layer} head={args.head} in {args.trace}")
    lines = ["frame,weight"] + [f"{int(f)},{float(w)!r}" for f, w in prof["per_frame_weight"]]
    _write_all({_out_dir(args) / "profile.csv": "\n".join(lines)})
    return EXIT_OK


def cmd_schema(args) -> int:
    text = json.dumps(CONFIG_SCHEMA, indent=2)
    if args.out:
        _write_all({Path(args.out) / "config.schema.json": text})
    else:
        sys.stdout.write(text + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamkv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def run_opts(p):
        p.add_argument("--config", metavar="PATH", help="JSON run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. policy.sink_frames=10")
        p.add_argument("--seed", type=int, help="run a single seed (overrides seeds)")
        p.add_argument("--out", metavar="DIR", help="output directory")

    p = sub.add_parser("simulate", help="run one policy; writes trace.jsonl and summary.csv")
    run_opts(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="run several policies; writes policies.csv")
    run_opts(p)
    p.add_argument("--policies", help="comma-separated policy names (default: all)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("heatmap", help="Top-C selection counts per slot; writes heatmap.csv")
    p.add_argument("--trace", required=True, metavar="PATH")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("profile", help="per-frame attention profile; writes profile.csv")
    p.add_argument("--trace", required=True, metavar="PATH")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--index", type=int, default=0, help="rollout index in a multi-seed trace")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("schema", help="print the JSON schema of the run configuration")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_schema)
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except IndexError as exc:
        return _fail(EXIT_CONFIG, "config", f"index out of range: {exc}")
    except (CacheError, TriggerError, ValueError) as exc:
        return _fail(EXIT_RUNTIME, "invariant", f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
