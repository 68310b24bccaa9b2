"""``shadowfl`` command line: run, verify, sweep and inspect.

Config files are flat ``key = value`` lines. ``#`` starts a comment and
comma-separated values form a list. In ``sweep`` a list given for a scalar
key becomes a grid axis; tuple-valued keys always take the whole list.
"""

from __future__ import annotations

import argparse
from concurrent.futures import ProcessPoolExecutor
import dataclasses
import difflib
import hashlib
import itertools
import json
import os
from pathlib import Path
import sys

from .io import CheckpointError, atomic_write_text, load_checkpoint
from .simulator import ConfigInvalid, ExperimentConfig, records_csv, run_experiment

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


class ParseError(ValueError):
    def __init__(self, line: int, field: str, message: str):
        super().__init__(f"line {line}: {field}: {message}")
        self.line = line
        self.field = field


class ValidationError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_DEFAULTS = ExperimentConfig()


def _coerce(name: str, raw: str, line: int):
    default = getattr(_DEFAULTS, name)
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ParseError(line, name, str(exc)) from None


def _coerce_tuple(name: str, items: list, line: int) -> tuple:
    out = []
    for it in items:
        try:
            out.append(float(it) if name == "phase_keep" else int(it))
        except ValueError:
            raise ParseError(line, name, f"bad list entry {it!r}") from None
    return tuple(out)


def parse_lines(text: str, allow_grid: bool = False) -> dict:
    """Parse config text into ``{key: value}``; grid axes come back as lists."""
    values: dict = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(no, line, "expected 'key = value'")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in _FIELDS:
            near = difflib.get_close_matches(key, list(_FIELDS), n=1)
            hint = f" (did you mean {near[0]!r}?)" if near else ""
            raise ParseError(no, key, f"unknown key{hint}")
        if key in values:
            raise ParseError(no, key, "duplicate key")
        items = [v.strip() for v in val.split(",")] if val else []
        if isinstance(getattr(_DEFAULTS, key), tuple):
            values[key] = _coerce_tuple(key, [i for i in items if i], no)
        elif len(items) > 1:
            if not allow_grid:
                raise ParseError(no, key, "list values are only allowed in sweep configs")
            values[key] = [_coerce(key, v, no) for v in items]
        else:
            values[key] = _coerce(key, val, no)
    return values


def build_config(values: dict) -> ExperimentConfig:
    cfg = ExperimentConfig(**values)
    problems = cfg.problems()
    if problems:
        raise ValidationError(problems)
    return cfg


def parse_config(path, **overrides) -> ExperimentConfig:
    values = parse_lines(Path(path).read_text())
    values.update({k: v for k, v in overrides.items() if v is not None})
    return build_config(values)


def sweep_grid(values: dict) -> list[tuple[str, dict]]:
    """Expand grid axes in a deterministic order; names encode the axis values."""
    axes = sorted(k for k, v in values.items() if isinstance(v, list))
    fixed = {k: v for k, v in values.items() if k not in axes}
    out = []
    for combo in itertools.product(*(values[a] for a in axes)):
        params = dict(zip(axes, combo))
        name = "_".join(f"{a}-{_label(v)}" for a, v in params.items()) or "run"
        out.append((name, {**fixed, **params}))
    return out


def _label(v) -> str:
    return f"{v:g}" if isinstance(v, float) else str(v)


def derived_seed(base: int, params: dict) -> int:
    blob = json.dumps([base, sorted((k, _label(v)) for k, v in params.items())]).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:4], "little") & 0x7FFFFFFF


def worker_count(n_jobs: int) -> int:
    try:
        cap = int(os.environ.get("SHADOWFL_THREADS", "1"))
    except ValueError:
        cap = 1
    return max(1, min(cap, n_jobs))


def _progress(rec) -> None:
    if rec.round % 25 == 0 or rec.round < 1:
        print(f"round {rec.round:5d}  mta={rec.mta:.4f}  asr={rec.asr:.4f}", file=sys.stderr, flush=True)


def cmd_run(args) -> int:
    cfg = parse_config(args.config, seed=args.seed, rounds=args.rounds)
    res = run_experiment(cfg, args.out, progress=None if args.quiet else _progress)
    print(json.dumps(res.summary, sort_keys=True))
    return EXIT_OK


def _run_one(job):
    name, cfg, out = job
    res = run_experiment(cfg, Path(out) / name)
    atomic_write_text(Path(out) / f"{name}.csv", records_csv(res.records))
    return name, res.summary


def cmd_sweep(args) -> int:
    values = parse_lines(Path(args.config).read_text(), allow_grid=True)
    base = values.get("seed", _DEFAULTS.seed)
    jobs = []
    for name, params in sweep_grid(values):
        axis = {k: v for k, v in params.items() if isinstance(values.get(k), list)}
        params = {**params, "seed": derived_seed(base, axis)}
        jobs.append((name, build_config(params), args.out))
    Path(args.out).mkdir(parents=True, exist_ok=True)
    workers = worker_count(len(jobs))
    if workers == 1:
        results = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_one, jobs))
    index = {name: summary for name, summary in results}
    atomic_write_text(Path(args.out) / "sweep.json", json.dumps(index, indent=2, sort_keys=True) + "\n")
    for name, summary in results:
        print(f"{name}: final_mta={summary['final_mta']:.4f} final_asr={summary['final_asr']:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verification import run_suite

    def show(res):
        print(f"{res.status:6s} {res.name} ({res.seconds:.1f}s)", flush=True)

    results = run_suite(args.out, quick=args.quick, progress=show)
    return EXIT_OK if all(r.passed is not False for r in results) else EXIT_FAILED


def cmd_inspect(args) -> int:
    header, payload = load_checkpoint(args.checkpoint)
    print(json.dumps({"header": header, "payload_values": int(payload.size)}, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shadowfl", description="Federated backdoor-defense simulator.")
    sub = p.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--rounds", type=int)
    r.add_argument("--quiet", action="store_true")
    r.set_defaults(fn=cmd_run)
    v = sub.add_parser("verify", help="run the verification suite")
    v.add_argument("--out", required=True)
    v.add_argument("--quick", action="store_true")
    v.set_defaults(fn=cmd_verify)
    s = sub.add_parser("sweep", help="run the Cartesian product of list-valued keys")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sweep)
    i = sub.add_parser("inspect", help="print checkpoint metadata")
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for attr in ("config", "checkpoint"):
        path = getattr(args, attr, None)
        if path is not None and not Path(path).is_file():
            print(f"error: {attr} file not found: {path}", file=sys.stderr)
            return EXIT_USAGE
    try:
        return args.fn(args)
    except (ParseError, ValidationError, ConfigInvalid) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except Exception as exc:  # noqa: BLE001 - every module error maps to a nonzero exit
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
