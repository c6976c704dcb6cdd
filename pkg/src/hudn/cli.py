"""Command-line experiment runner.

Every subcommand reads an optional INI file whose sections mirror the
sub-configs ([scenario], [pathloss], [train], [srl], [baseline], [run]);
``--set section.key=value`` overrides single entries.  Artifacts go to the
output directory (``--output-dir``, else ``$HUDN_OUTPUT_DIR``, else the
working directory) together with a JSON manifest per invocation.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import __version__
from . import baselines as bl
from . import gradengine as ge
from . import trainer as tr
from .objective import (
    InfeasibleAllocation,
    check_feasible,
    one_hot,
    rate_report,
    write_loads_csv,
    write_reports_csv,
)
from .radiomap import (
    PathLossParams,
    RadioMapError,
    build_radio_map,
    export_csv,
    load_radio_map,
    save_radio_map,
)
from .scenario import ScenarioConfig, ScenarioError, generate_scenario, load_scenario, sample_event, save_scenario

log = logging.getLogger("hudn")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISMATCH = 3
EXIT_NUMERIC = 4
EXIT_MISSING = 5
EXIT_UNWRITABLE = 6

OUTPUT_ENV = "HUDN_OUTPUT_DIR"
SCENARIO_FILE = "scenario.ini"
RADIOMAP_FILE = "radiomap.bin"
GRL_CHECKPOINT = "grl.ckpt"
ALIASES = {"msua": "msuamp"}


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_events: int = 50
    workers: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    pathloss: PathLossParams = field(default_factory=PathLossParams)
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    srl: tr.TrainConfig = field(default_factory=tr.srl_config)
    baseline: bl.BaselineConfig = field(default_factory=bl.BaselineConfig)
    run: RunConfig = field(default_factory=RunConfig)
    output_dir: str = "."
    # scenario keys set by the user; checked against an existing scenario file
    scenario_keys: tuple[str, ...] = ()

    def validate(self) -> None:
        self.scenario.validate()
        self.pathloss.validate()
        self.train.validate()
        self.srl.validate()
        self.baseline.validate()
        if self.run.n_events < 1 or self.run.workers < 1:
            raise ValueError("n_events and workers must be >= 1")

    def to_dict(self) -> dict:
        return {s: asdict(getattr(self, s)) for s in SECTIONS} | {"output_dir": self.output_dir}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


SECTIONS = ("scenario", "pathloss", "train", "srl", "baseline", "run")


def derive_seed(root: int, name: str) -> int:
    """Seed for subsystem ``name``, a pure function of the root seed."""
    ss = np.random.SeedSequence(int(root), spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _coerce(template, raw: str):
    if isinstance(template, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    if raw.strip().lower() in ("", "none"):
        return None
    return raw


def load_config(path=None, overrides=(), output_dir=None) -> ExperimentConfig:
    """Build and validate the experiment config; raises ``CliError``."""
    values: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    if path is not None:
        if not os.path.exists(path):
            raise CliError(f"config file not found: {path}", EXIT_MISSING)
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise CliError(f"malformed config file: {exc}", EXIT_CONFIG) from exc
        for sec in cp.sections():
            if sec not in values:
                raise CliError(f"unknown config section [{sec}]", EXIT_CONFIG)
            values[sec].update(cp[sec])
    for item in overrides:
        key, sep, raw = item.partition("=")
        sec, dot, name = key.strip().partition(".")
        if not sep or not dot or sec not in values:
            raise CliError(f"override must look like section.key=value: {item!r}", EXIT_CONFIG)
        values[sec][name.strip()] = raw.strip()

    base = ExperimentConfig()
    scenario_keys = tuple(sorted(values["scenario"]))
    root = int(values["run"].get("seed", base.run.seed))
    # seeds not given explicitly come from the root seed
    values["scenario"].setdefault("seed", str(derive_seed(root, "scenario")))
    values["train"].setdefault("seed", str(derive_seed(root, "grl")))
    values["srl"].setdefault("seed", str(derive_seed(root, "srl")))
    parts = {}
    for sec in SECTIONS:
        current = getattr(base, sec)
        known = {f.name for f in fields(current)}
        kw = {}
        for name, raw in values[sec].items():
            if name not in known:
                raise CliError(f"unknown key {sec}.{name}", EXIT_CONFIG)
            try:
                kw[name] = _coerce(getattr(current, name), raw)
            except ValueError as exc:
                raise CliError(f"{sec}.{name}: {exc}", EXIT_CONFIG) from exc
        parts[sec] = replace(current, **kw)
    out = output_dir or os.environ.get(OUTPUT_ENV) or "."
    cfg = ExperimentConfig(**parts, output_dir=out, scenario_keys=scenario_keys)
    try:
        cfg.validate()
    except ValueError as exc:
        raise CliError(f"invalid configuration: {exc}", EXIT_CONFIG) from exc
    return cfg


# -- helpers ---------------------------------------------------------------


def _ensure_writable(directory: str) -> None:
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {directory}: {exc}", EXIT_UNWRITABLE) from exc
    if not os.access(directory, os.W_OK | os.X_OK):
        raise CliError(f"output directory not writable: {directory}", EXIT_UNWRITABLE)


def _out(cfg: ExperimentConfig, name: str) -> str:
    return os.path.join(cfg.output_dir, name)


def _need(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise CliError(f"missing {what}: {path}", EXIT_MISSING)
    return path


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(cfg: ExperimentConfig, command: str, inputs=(), outputs=(), extra=None) -> None:
    import sklearn

    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "seeds": {
            "root": cfg.run.seed,
            "scenario": cfg.scenario.seed,
            "grl": cfg.train.seed,
            "srl": cfg.srl.seed,
            "events": derive_seed(cfg.run.seed, "events"),
        },
        "inputs": {os.path.basename(p): _sha256(p) for p in inputs},
        "outputs": sorted(os.path.basename(p) for p in outputs),
        "versions": {
            "hudn": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scikit-learn": sklearn.__version__,
        },
    }
    if extra:
        manifest.update(extra)
    with open(_out(cfg, f"manifest_{command}.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_scenario(cfg):
    path = _need(_out(cfg, SCENARIO_FILE), "scenario file (run gen-scenario)")
    try:
        scenario = load_scenario(path)
    except ScenarioError as exc:
        raise CliError(str(exc), EXIT_MISMATCH) from exc
    for key in cfg.scenario_keys:
        if getattr(scenario.config, key) != getattr(cfg.scenario, key):
            raise CliError(f"scenario file has {key}={getattr(scenario.config, key)!r}, "
                           f"config says {getattr(cfg.scenario, key)!r}", EXIT_MISMATCH)
    return scenario, path


def _load_map(cfg, scenario):
    path = _need(_out(cfg, RADIOMAP_FILE), "radio map (run build-radiomap)")
    try:
        return load_radio_map(path, expected_digest=scenario.digest()), path
    except RadioMapError as exc:
        raise CliError(str(exc), EXIT_MISMATCH) from exc


def _events(cfg, scenario, K_a):
    rng = np.random.default_rng(derive_seed(cfg.run.seed, "events"))
    try:
        return [sample_event(scenario, K_a, rng) for _ in range(cfg.run.n_events)]
    except ScenarioError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc


def _load_params(cfg, path, scenario, K_a):
    _need(path, "checkpoint (run train-grl)")
    try:
        params, meta = ge.load_checkpoint(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(f"unreadable checkpoint: {exc}", EXIT_MISMATCH) from exc
    if meta.get("scenario_digest") not in (None, scenario.digest()):
        raise CliError("checkpoint was trained on a different scenario", EXIT_MISMATCH)
    if meta.get("K_a") not in (None, K_a):
        raise CliError(f"checkpoint expects K_a={meta['K_a']}, config has {K_a}", EXIT_MISMATCH)
    return params


def _pmap(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _write_timings(path, seconds) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["event", "wall_clock_s"])
        for e, s in enumerate(seconds):
            out.writerow([e, f"{s:.17g}"])


def _write_results(cfg, name, reports, wall) -> list[str]:
    paths = [_out(cfg, f"reports_{name}.csv"), _out(cfg, f"loads_{name}.csv"),
             _out(cfg, f"timings_{name}.csv")]
    write_reports_csv(reports, paths[0])
    write_loads_csv(reports, paths[1])
    _write_timings(paths[2], wall)
    return paths


class _BaselineJob:
    def __init__(self, name, gains_rows, p_max, cfg: ExperimentConfig):
        self.solve = bl.BASELINES[name] if name != "oracle" else None
        self.gains_rows = gains_rows
        self.p_max = p_max
        self.train = cfg.train
        self.baseline = cfg.baseline

    def __call__(self, k):
        g = self.gains_rows[k]
        t0 = time.perf_counter()
        if self.solve is None:
            alloc, _ = bl.brute_force_oracle(g, self.p_max, self.train.sigma2, self.train.bandwidth,
                                             config=self.baseline)
        else:
            alloc = self.solve(g, self.p_max, self.train.sigma2, self.train.bandwidth, config=self.baseline)
        elapsed = time.perf_counter() - t0
        alloc.check(self.p_max)
        return rate_report(alloc, g, self.train.bandwidth, self.train.sigma2, elapsed)


def _run_baseline(cfg, name):
    scenario, sp = _load_scenario(cfg)
    rmap, mp = _load_map(cfg, scenario)
    events = _events(cfg, scenario, cfg.train.K_a)
    job = _BaselineJob(name, [rmap.rows(ev.indices) for ev in events], scenario.p_max, cfg)
    try:
        reports = _pmap(job, list(range(len(events))), cfg.run.workers)
    except bl.BudgetExceeded as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    outputs = _write_results(cfg, name, reports, [r.wall_clock for r in reports])
    _write_manifest(cfg, f"baseline_{name}" if name != "oracle" else "oracle", [sp, mp], outputs)
    return reports


# -- subcommands -----------------------------------------------------------


def cmd_gen_scenario(cfg, args):
    scenario = generate_scenario(cfg.scenario)
    path = _out(cfg, SCENARIO_FILE)
    save_scenario(scenario, path)
    _write_manifest(cfg, "gen-scenario", outputs=[path], extra={"scenario_digest": scenario.digest()})
    log.info("scenario: %d sites, %d grid points -> %s", scenario.n_sites, scenario.n_grid, path)


def cmd_build_radiomap(cfg, args):
    scenario, sp = _load_scenario(cfg)
    rmap = build_radio_map(scenario, cfg.pathloss)
    path = _out(cfg, RADIOMAP_FILE)
    save_radio_map(rmap, path)
    outputs = [path]
    if args.csv:
        outputs.append(_out(cfg, "radiomap.csv"))
        export_csv(rmap, outputs[-1])
    _write_manifest(cfg, "build-radiomap", [sp], outputs)
    log.info("radio map %dx%d -> %s", *rmap.gains.shape, path)


def cmd_train_grl(cfg, args):
    scenario, sp = _load_scenario(cfg)
    rmap, mp = _load_map(cfg, scenario)
    train = cfg.train
    if train.checkpoint_every and not train.checkpoint_dir:
        train = replace(train, checkpoint_dir=_out(cfg, "checkpoints"))
    t0 = time.perf_counter()
    params, rows = tr.grl_train(rmap, train, scenario.p_max)
    elapsed = time.perf_counter() - t0
    ckpt, logp = _out(cfg, GRL_CHECKPOINT), _out(cfg, "grl_log.csv")
    meta = {"K_a": train.K_a, "scenario_digest": scenario.digest(), "config": tr.config_dict(train)}
    ge.save_checkpoint(ckpt, params, meta)
    tr.write_log_csv(rows, logp)
    _write_manifest(cfg, "train-grl", [sp, mp], [ckpt, logp], extra={"train_seconds": elapsed})
    log.info("GRL: %d steps in %.1fs -> %s", train.steps, elapsed, ckpt)


def cmd_eval(cfg, args):
    scenario, sp = _load_scenario(cfg)
    rmap, mp = _load_map(cfg, scenario)
    ckpt = args.checkpoint or _out(cfg, GRL_CHECKPOINT)
    params = _load_params(cfg, ckpt, scenario, cfg.train.K_a)
    events = _events(cfg, scenario, cfg.train.K_a)
    reports = tr.evaluate(params, rmap, events, scenario.p_max, cfg.train)
    for rep in reports:
        _check_report(rep, scenario.p_max)
    outputs = _write_results(cfg, args.name, reports, [r.wall_clock for r in reports])
    _write_manifest(cfg, "eval", [sp, mp, ckpt], outputs)


def _check_report(rep, p_max):
    # nothing leaves the runner unless it satisfies C1/C2
    try:
        check_feasible(one_hot(rep.serving, len(rep.power)), rep.power, p_max)
    except InfeasibleAllocation as exc:
        raise CliError(str(exc), EXIT_NUMERIC) from exc


class _SrlJob:
    def __init__(self, rmap, events, params, srl, p_max, ckpt_dir):
        self.rmap, self.events, self.params = rmap, events, params
        self.srl, self.p_max, self.ckpt_dir = srl, p_max, ckpt_dir

    def __call__(self, k):
        ev = self.events[k]
        cfg = replace(self.srl, seed=derive_seed(self.srl.seed, f"event{k}"))
        t0 = time.perf_counter()
        params, rows = tr.srl_train(self.rmap, ev, self.params, cfg, self.p_max)
        train_s = time.perf_counter() - t0
        (rep,) = tr.evaluate(params, self.rmap, [ev], self.p_max, cfg)
        ge.save_checkpoint(os.path.join(self.ckpt_dir, f"srl_event{k}.ckpt"), params,
                           {"event": list(ev.active_ue), "K_a": ev.K_a})
        tr.write_log_csv(rows, os.path.join(self.ckpt_dir, f"srl_log_event{k}.csv"))
        # per-event cost of this scheme includes the fine-tuning itself
        rep.wall_clock += train_s
        return rep, train_s


def cmd_train_srl(cfg, args):
    scenario, sp = _load_scenario(cfg)
    rmap, mp = _load_map(cfg, scenario)
    ckpt = args.checkpoint or _out(cfg, GRL_CHECKPOINT)
    K_a = cfg.train.K_a
    params = _load_params(cfg, ckpt, scenario, K_a)
    events = _events(cfg, scenario, K_a)
    picked = list(range(len(events))) if args.event is None else [args.event]
    if any(not 0 <= k < len(events) for k in picked):
        raise CliError(f"--event must lie in [0, {len(events)})", EXIT_CONFIG)
    srl_dir = _out(cfg, "srl")
    _ensure_writable(srl_dir)
    srl = replace(cfg.srl, K_a=K_a)
    job = _SrlJob(rmap, events, params, srl, scenario.p_max, srl_dir)
    results = _pmap(job, picked, cfg.run.workers)
    reports = [r for r, _ in results]
    for rep in reports:
        _check_report(rep, scenario.p_max)
    outputs = _write_results(cfg, "srl", reports, [r.wall_clock for r in reports])
    _write_manifest(cfg, "train-srl", [sp, mp, ckpt], outputs,
                    extra={"events": picked, "train_seconds": [s for _, s in results]})


def cmd_baseline(cfg, args):
    name = ALIASES.get(args.name, args.name)
    if name not in bl.BASELINES:
        raise CliError(f"unknown baseline {args.name!r}; choose from {sorted(bl.BASELINES)}", EXIT_CONFIG)
    _run_baseline(cfg, name)


def cmd_oracle(cfg, args):
    _run_baseline(cfg, "oracle")


def _read_reports(path):
    per_event: dict[str, float] = {}
    rates = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            r = float(row["rate_bps"])
            per_event[row["event"]] = per_event.get(row["event"], 0.0) + r
            rates.append(r)
    return per_event, rates


def _read_timings(path):
    with open(path, newline="") as fh:
        return [float(row["wall_clock_s"]) for row in csv.DictReader(fh)]


def cmd_report(cfg, args):
    names = [ALIASES.get(n, n) for n in args.algorithms.split(",") if n]
    if not names:
        raise CliError("no algorithms given", EXIT_CONFIG)
    B = cfg.train.bandwidth
    summary, cdf, inputs = [], [], []
    for name in names:
        path = _out(cfg, f"reports_{name}.csv")
        if not os.path.exists(path):
            if name in bl.BASELINES:
                _run_baseline(cfg, name)
            else:
                raise CliError(f"missing reports for {name}: {path}", EXIT_MISSING)
        per_event, rates = _read_reports(path)
        timings = _read_timings(_need(_out(cfg, f"timings_{name}.csv"), f"timings for {name}"))
        inputs.append(path)
        mean_r = float(np.mean(list(per_event.values())))
        summary.append([name, mean_r, mean_r / B, float(np.mean(timings))])
        ordered = np.sort(np.asarray(rates))
        n = len(ordered)
        cdf.extend([name, i, r, r / B, (i + 1) / n] for i, r in enumerate(ordered))
    spath, cpath = _out(cfg, "summary.csv"), _out(cfg, "cdf.csv")
    with open(spath, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["algorithm", "mean_rate_bps", "mean_rate_bps_per_hz", "mean_wall_clock_s"])
        for name, *vals in summary:
            out.writerow([name, *(f"{v:.17g}" for v in vals)])
    with open(cpath, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["algorithm", "rank", "rate_bps", "rate_bps_per_hz", "quantile"])
        for name, i, *vals in cdf:
            out.writerow([name, i, *(f"{v:.17g}" for v in vals)])
    _write_manifest(cfg, "report", inputs, [spath, cpath])
    for name, r, rh, t in summary:
        print(f"{name:12s} {rh:12.4f} bit/s/Hz  {t:10.4f} s/event")


# -- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="INI file with [scenario], [train], ... sections")
    common.add_argument("-s", "--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one config entry (repeatable)")
    common.add_argument("-o", "--output-dir", help=f"artifact directory (default ${OUTPUT_ENV} or .)")
    common.add_argument("--seed", type=int, help="root seed (same as --set run.seed=N)")
    common.add_argument("--events", type=int, help="number of evaluation events")
    common.add_argument("--workers", type=int, help="processes used across events")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="hudn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-scenario", parents=[common], help="lay out sites and buildings").set_defaults(
        func=cmd_gen_scenario)
    p = sub.add_parser("build-radiomap", parents=[common], help="path gains for every grid point")
    p.add_argument("--csv", action="store_true", help="also export radiomap.csv")
    p.set_defaults(func=cmd_build_radiomap)
    sub.add_parser("train-grl", parents=[common], help="multi-event training").set_defaults(
        func=cmd_train_grl)
    p = sub.add_parser("train-srl", parents=[common], help="per-event fine-tuning")
    p.add_argument("--checkpoint", help=f"starting parameters (default {GRL_CHECKPOINT})")
    p.add_argument("--event", type=int, help="fine-tune only this event index")
    p.set_defaults(func=cmd_train_srl)
    p = sub.add_parser("baseline", parents=[common], help="run a reference scheme")
    p.add_argument("name", help=", ".join(sorted(bl.BASELINES)))
    p.set_defaults(func=cmd_baseline)
    p = sub.add_parser("eval", parents=[common], help="inference with a trained checkpoint")
    p.add_argument("--checkpoint", help=f"parameters (default {GRL_CHECKPOINT})")
    p.add_argument("--name", default="grl", help="label used in output file names")
    p.set_defaults(func=cmd_eval)
    sub.add_parser("oracle", parents=[common], help="exhaustive search (tiny events only)").set_defaults(
        func=cmd_oracle)
    p = sub.add_parser("report", parents=[common], help="summary table and rate CDF")
    p.add_argument("--algorithms", default="grl,srl,marap,msuamp,msuapc,uamwser,juapcmwser")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    for flag, key in ((args.seed, "run.seed"), (args.events, "run.n_events"), (args.workers, "run.workers")):
        if flag is not None:
            overrides.append(f"{key}={flag}")
    try:
        cfg = load_config(args.config, overrides, args.output_dir)
        _ensure_writable(cfg.output_dir)
        args.func(cfg, args)
    except CliError as exc:
        print(f"hudn: error: {exc}", file=sys.stderr)
        return exc.code
    except (ge.NonFiniteError, InfeasibleAllocation) as exc:
        print(f"hudn: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ScenarioError as exc:
        print(f"hudn: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PermissionError as exc:
        print(f"hudn: cannot write output: {exc}", file=sys.stderr)
        return EXIT_UNWRITABLE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
