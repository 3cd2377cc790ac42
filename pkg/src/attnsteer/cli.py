"""``steer`` command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data error, 4 internal error.
"""

from __future__ import annotations

import argparse
import configparser
import importlib.resources
import json
import logging
import random
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from attnsteer import bench
from attnsteer.digest import fnv1a64, hex64
from attnsteer.model import (
    ModelConfig,
    WeightFormatError,
    build_sequence,
    init_random,
    load_weights,
    prefill,
    save_weights,
)
from attnsteer.profiler import (
    DEFAULT_MAX_NEW,
    DEFAULT_SERVING_PREFIX,
    DEFAULT_TOP_M,
    EvalExample,
    load_jsonl,
    profile,
    token_f1,
)
from attnsteer.steering import (
    AGGREGATIONS,
    DEFAULT_ALPHA,
    DEFAULT_K,
    DEFAULT_PREFIX_1,
    DEFAULT_PREFIX_2,
    MODES,
    SCALE_AXES,
    SteeringPlan,
    build_plan,
    build_steered_cache,
)
from attnsteer.store import CacheKey, CacheStore, CorruptEntryError, StoreError

log = logging.getLogger("attnsteer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    model: str = "model.bin"
    store: str = "kvstore"
    serving_prefix: str = DEFAULT_SERVING_PREFIX
    prefix_1: str = DEFAULT_PREFIX_1
    prefix_2: str = DEFAULT_PREFIX_2
    k: int = DEFAULT_K
    alpha: float = DEFAULT_ALPHA
    mode: str = "both"
    renormalize: bool = True
    scale_axis: str = "column"
    aggregation: str = "sum"
    length_normalized: bool = False
    max_new: int = DEFAULT_MAX_NEW
    seed: int = 42

    def validate(self) -> None:
        if self.k < 1:
            raise UsageError("k must be >= 1")
        if not self.alpha > 0:
            raise UsageError("alpha must be > 0")
        if self.mode not in MODES:
            raise UsageError(f"mode must be one of {MODES}")
        if self.scale_axis not in SCALE_AXES:
            raise UsageError(f"scale_axis must be one of {SCALE_AXES}")
        if self.aggregation not in AGGREGATIONS:
            raise UsageError(f"aggregation must be one of {AGGREGATIONS}")
        if self.max_new < 0:
            raise UsageError("max_new must be >= 0")
        if self.prefix_1 == self.prefix_2:
            raise UsageError("prefix_1 and prefix_2 must differ")

    def plan_options(self) -> dict:
        return dict(mode=self.mode, renormalize=self.renormalize, scale_axis=self.scale_axis,
                    aggregation=self.aggregation, length_normalized=self.length_normalized)

    def matches(self, plan: SteeringPlan) -> bool:
        return (plan.alpha == self.alpha and plan.k == self.k and plan.mode == self.mode
                and plan.renormalize == self.renormalize and plan.scale_axis == self.scale_axis
                and plan.aggregation == self.aggregation
                and plan.length_normalized == self.length_normalized
                and plan.prefix_hashes == (fnv1a64(self.prefix_1), fnv1a64(self.prefix_2)))


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    try:
        if kind == "bool":
            low = str(raw).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise UsageError(f"config key {name}: cannot parse {raw!r} as {kind}") from None
    raw = str(raw)
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        raw = raw[1:-1]
    return raw


def load_config_file(path: str | Path) -> dict:
    """Flat ``key = value`` file; ``#`` comments; string values may be quoted."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + Path(path).read_text(encoding="utf-8"))
    except (configparser.Error, OSError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    values = {}
    for key, raw in parser["run"].items():
        name = key.replace("-", "_")
        if name not in _FIELD_TYPES:
            raise UsageError(f"unknown config key {key!r}")
        values[name] = _coerce(name, raw)
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = load_config_file(args.config) if args.config else {}
    for name in _FIELD_TYPES:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# helpers


def load_schema(name: str) -> dict:
    """JSON schema shipped for the ``name`` report (or ``plan``)."""
    path = importlib.resources.files("attnsteer") / "schemas" / f"{name}.json"
    return json.loads(path.read_text(encoding="utf-8"))


def _emit(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _read_text(path: str, what: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {what} {path}: {exc}") from exc


def _load_model(cfg: RunConfig):
    try:
        return load_weights(cfg.model)
    except OSError as exc:
        raise DataError(f"cannot read model {cfg.model}: {exc}") from exc
    except WeightFormatError as exc:
        raise DataError(f"{cfg.model}: {exc} [{exc.code}]") from exc


def _load_dataset(path: str, sample: int | None = None, seed: int = 0) -> list[EvalExample]:
    try:
        data = load_jsonl(path)
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if not data:
        raise DataError(f"dataset {path} is empty")
    if sample is not None and sample < len(data):
        data = random.Random(seed).sample(data, sample)
    return data


def find_steered(store: CacheStore, weights, cfg: RunConfig, context: str):
    """Stored steered entry whose plan matches the run configuration."""
    for key in store.find(weights.content_hash, fnv1a64(cfg.serving_prefix), fnv1a64(context),
                          steered=True):
        hit = store.get(key, quarantine=False)
        if hit is not None and hit.plan is not None and cfg.matches(hit.plan):
            return hit
    return None


def ensure_caches(weights, cfg: RunConfig, context: str, store: CacheStore):
    """Build or fetch the unsteered and steered serving caches for ``context``."""
    base_key = CacheKey.for_inputs(weights, cfg.serving_prefix, context)
    base = store.get(base_key)
    base_hit = base is not None
    if not base_hit:
        cache = prefill(weights, build_sequence(cfg.serving_prefix, context)).cache
        store.put(base_key, cache)
        base = store.get(base_key)

    plan, _, _ = build_plan(weights, context, cfg.prefix_1, cfg.prefix_2, k=cfg.k,
                            alpha=cfg.alpha, **cfg.plan_options())
    steered_key = CacheKey.for_inputs(weights, cfg.serving_prefix, context, plan)
    steered = store.get(steered_key)
    steered_hit = steered is not None
    if not steered_hit:
        cache = build_steered_cache(weights, cfg.serving_prefix, context, plan)
        store.put(steered_key, cache, plan)
        steered = store.get(steered_key)
    return base, base_hit, steered, steered_hit, plan


# --------------------------------------------------------------------------
# commands


def cmd_init_model(args, cfg: RunConfig) -> int:
    mcfg = ModelConfig(n_layers=args.n_layers, n_heads=args.n_heads, d_model=args.d_model,
                       d_ff=args.d_ff, max_positions=args.max_positions)
    weights = init_random(mcfg, cfg.seed)
    out = args.path or cfg.model
    try:
        digest = save_weights(weights, out)
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc}") from exc
    _emit({"command": "init-model", "path": str(out), "seed": cfg.seed,
           "content_hash": hex64(digest), "config": vars(mcfg)}, args.out)
    return EXIT_OK


def cmd_build(args, cfg: RunConfig) -> int:
    context = _read_text(args.context, "context")
    if not context:
        raise DataError("context is empty")
    weights = _load_model(cfg)
    store = CacheStore(cfg.store)
    base, base_hit, steered, steered_hit, plan = ensure_caches(weights, cfg, context, store)
    if args.plan_out:
        Path(args.plan_out).write_text(plan.to_json(), encoding="utf-8")
    _emit({
        "command": "build",
        "unsteered_key": base.key.hex(),
        "steered_key": steered.key.hex(),
        "plan_hash": hex64(plan.digest),
        "unsteered_hit": base_hit,
        "steered_hit": steered_hit,
        "cached_len": steered.cache.cached_len,
        "selected": {str(e.layer): len(e.tokens) for e in plan.entries},
        "plan": plan.to_dict(),
    }, args.out)
    return EXIT_OK


def cmd_answer(args, cfg: RunConfig) -> int:
    question = (args.question or "").strip()
    if not question:
        raise UsageError("answer needs a non-empty --question")
    if not args.key and not args.context:
        raise UsageError("answer needs --key or --context")
    weights = _load_model(cfg)
    store = CacheStore(cfg.store)
    context = _read_text(args.context, "context") if args.context else None

    hit = None
    try:
        if args.key:
            key = CacheKey.from_hex(args.key)
            hit = store.get(key, quarantine=False)
        elif args.unsteered:
            hit = store.get(CacheKey.for_inputs(weights, cfg.serving_prefix, context),
                            quarantine=False)
        else:
            hit = find_steered(store, weights, cfg, context)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    if args.no_cache:
        if context is None:
            raise UsageError("--no-cache needs --context")
        plan = None
        if not args.unsteered:
            plan = hit.plan if hit is not None else build_plan(
                weights, context, cfg.prefix_1, cfg.prefix_2, k=cfg.k, alpha=cfg.alpha,
                **cfg.plan_options())[0]
        timing = bench.answer(weights, question, cfg.max_new, cache=None,
                              serving_prefix=cfg.serving_prefix, context=context, plan=plan)
    else:
        if hit is None:
            raise DataError("no cache entry found; run `steer build` first or pass --no-cache")
        timing = bench.answer(weights, question, cfg.max_new, cache=hit.cache, plan=hit.plan)
    row = bench.bench_row("answer", [timing])
    _emit({"command": "answer", "prediction": timing.prediction,
           "key": hit.key.hex() if hit is not None else None, "timing": row}, args.out)
    return EXIT_OK


def cmd_profile(args, cfg: RunConfig) -> int:
    weights = _load_model(cfg)
    if args.budget is not None and args.budget < weights.config.n_layers + 1:
        raise UsageError(f"--budget must be >= n_layers + 1 = {weights.config.n_layers + 1}")
    dev = _load_dataset(args.dev, args.sample, cfg.seed)
    result = profile(weights, dev, cfg.k, cfg.alpha, budget=args.budget, top_m=args.top_m,
                     max_new=cfg.max_new, serving_prefix=cfg.serving_prefix,
                     prefix_1=cfg.prefix_1, prefix_2=cfg.prefix_2, **cfg.plan_options())
    doc = result.to_dict()
    doc["command"] = "profile"
    doc["examples"] = len(dev)
    _emit(doc, args.out)
    return EXIT_OK


def cmd_bench(args, cfg: RunConfig) -> int:
    weights = _load_model(cfg)
    data = _load_dataset(args.dataset, args.sample, cfg.seed)
    store = CacheStore(cfg.store)
    if args.repetitions < 1:
        raise UsageError("--repetitions must be >= 1")
    rows = []
    for ex in data:
        base, _, steered, _, _ = ensure_caches(weights, cfg, ex.context, store)
        setups = {
            "no-cache": dict(cache=None, serving_prefix=cfg.serving_prefix, context=ex.context),
            "cached-unsteered": dict(cache=base.cache),
            "cached-steered": dict(cache=steered.cache, plan=steered.plan),
        }
        # timing runs are serialized on purpose
        for config, kw in setups.items():
            runs = [bench.answer(weights, ex.question, cfg.max_new, config=config, **kw)
                    for _ in range(args.repetitions)]
            row = bench.bench_row(ex.id, runs)
            row["f1"] = token_f1(row["prediction"], ex.answers)
            rows.append(row)
    report = {"command": "bench", "requests": rows, "aggregates": bench.aggregate(rows),
              "repetitions": args.repetitions, "examples": len(data)}
    if args.predictions_out:
        with open(args.predictions_out, "w", encoding="utf-8") as fh:
            for r in rows:
                if r["config"] == args.predictions_config:
                    fh.write(json.dumps({"id": r["id"], "prediction": r["prediction"]}) + "\n")
    _emit(report, args.out)
    return EXIT_OK


def load_predictions(path: str) -> dict[str, str]:
    """JSONL of ``{"id", "prediction"}`` records, or one JSON object ``{id: text}``."""
    text = _read_text(path, "predictions")
    try:
        stripped = text.strip()
        if stripped.startswith("{") and "\n" not in stripped:
            doc = json.loads(stripped)
            if "id" not in doc:
                return {str(k): str(v) for k, v in doc.items()}
        out = {}
        for line in text.splitlines():
            if line.strip():
                rec = json.loads(line)
                out[str(rec["id"])] = str(rec["prediction"])
        return out
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"bad predictions file {path}: {exc}") from exc


def evaluate_predictions(preds: dict[str, str], data: list[EvalExample], tag: str = "") -> dict:
    records = []
    missing = []
    for ex in data:
        if ex.id not in preds:
            missing.append(ex.id)
            records.append({"id": ex.id, "prediction": None, "f1": 0.0, "config": tag})
            continue
        records.append({"id": ex.id, "prediction": preds[ex.id],
                        "f1": token_f1(preds[ex.id], ex.answers), "config": tag})
    known = {ex.id for ex in data}
    unexpected = sorted(i for i in preds if i not in known)
    return {
        "command": "eval",
        "mean_f1": sum(r["f1"] for r in records) / len(records),
        "count": len(records),
        "records": records,
        "missing_ids": missing,
        "unexpected_ids": unexpected,
    }


def cmd_eval(args, cfg: RunConfig) -> int:
    data = _load_dataset(args.dataset)
    preds = load_predictions(args.predictions)
    doc = evaluate_predictions(preds, data, args.tag)
    _emit(doc, args.out)
    return EXIT_OK if not doc["missing_ids"] and not doc["unexpected_ids"] else EXIT_DATA


# --------------------------------------------------------------------------
# argument parsing


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration (flags override --config)")
    g.add_argument("--config", help="flat key=value config file")
    g.add_argument("--model")
    g.add_argument("--store")
    g.add_argument("--serving-prefix", dest="serving_prefix")
    g.add_argument("--prefix-1", dest="prefix_1")
    g.add_argument("--prefix-2", dest="prefix_2")
    g.add_argument("--k", type=int)
    g.add_argument("--alpha", type=float)
    g.add_argument("--mode", choices=MODES)
    g.add_argument("--renormalize", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--scale-axis", dest="scale_axis", choices=SCALE_AXES)
    g.add_argument("--aggregation", choices=AGGREGATIONS)
    g.add_argument("--length-normalized", dest="length_normalized",
                   action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--max-new", dest="max_new", type=int)
    g.add_argument("--seed", type=int)
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="steer", description="Query-independent attention steering with prefix caching.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-model", help="create seeded random weights")
    _add_run_flags(p)
    p.add_argument("path", nargs="?", help="output path (default: config model path)")
    defaults = ModelConfig()
    p.add_argument("--n-layers", type=int, default=defaults.n_layers)
    p.add_argument("--n-heads", type=int, default=defaults.n_heads)
    p.add_argument("--d-model", type=int, default=defaults.d_model)
    p.add_argument("--d-ff", type=int, default=defaults.d_ff)
    p.add_argument("--max-positions", type=int, default=defaults.max_positions)
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("build", help="build the steering plan and cache entries for a context")
    _add_run_flags(p)
    p.add_argument("--context", required=True, help="context text file")
    p.add_argument("--plan-out", help="also write the canonical plan JSON here")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("answer", help="answer a question from a cached context")
    _add_run_flags(p)
    p.add_argument("--key", help="cache key (64 hex digits)")
    p.add_argument("--context", help="context text file (looks up the matching entry)")
    p.add_argument("--question", required=True)
    p.add_argument("--no-cache", action="store_true", help="prefill everything from scratch")
    p.add_argument("--unsteered", action="store_true", help="use the unsteered cache")
    p.set_defaults(func=cmd_answer)

    p = sub.add_parser("profile", help="coarse-to-fine search for the steering scope")
    _add_run_flags(p)
    p.add_argument("--dev", required=True, help="dev set JSONL")
    p.add_argument("--budget", type=int)
    p.add_argument("--top-m", dest="top_m", type=int, default=DEFAULT_TOP_M)
    p.add_argument("--sample", type=int)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("bench", help="measure request delay per serving configuration")
    _add_run_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--sample", type=int)
    p.add_argument("--predictions-out")
    p.add_argument("--predictions-config", default="cached-steered", choices=bench.CONFIGS)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="mean token F1 of a predictions file")
    _add_run_flags(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--tag", default="", help="configuration tag stored on each record")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"steer: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CorruptEntryError, StoreError) as exc:
        print(f"steer: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"steer: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
