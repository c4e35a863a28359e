"""Command line: ``detrl train | verify | gen-suite | report``.

Configs are JSON files.  A training config looks like::

    {
      "groups": ["deterministic", "initialization"],
      "n_runs": 5,
      "base_seeds": {"init_seed": 1},
      "hp": {"total_steps": 50000},
      "env": {"grid_w": 10},
      "suite_path": null,
      "sticky_suite_path": null,
      "parallelism": 1
    }

Every key is optional.  ``groups`` entries may also be objects with
``name`` plus per-group ``n_runs``, ``base_seeds``, ``hp`` and ``env``
overrides.  Null suite paths select the suites shipped with the package.

Exit codes: 0 success, 1 a negative result (runs differ, generation
shortfall, nothing to report), 2 bad input.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from detrl import __version__
from detrl import env as catch
from detrl import reference
from detrl.determinism import DIVERGED, IncomparableError, RunLog, compare_runs
from detrl.dqn import Hyperparams
from detrl.evalproto import (
    START_STATES,
    STICKY_SEEDS,
    EvalSuite,
    SuiteGenerationError,
    SuiteParams,
    make_start_state_suite,
    per_start_state_curve,
)
from detrl.nn import load_network
from detrl.rng import MASK64, SeedSpec
from detrl.sensitivity import (
    GROUP_NAMES,
    GroupReport,
    GroupSpec,
    build_group_configs,
    group_report,
    resolve_parallelism,
    run_configs,
    summary_table,
)

log = logging.getLogger("detrl")

EXIT_OK, EXIT_NEGATIVE, EXIT_BAD_INPUT = 0, 1, 2
OUTPUT_ENV_VAR = "DETRL_OUTPUT_DIR"
METADATA_FILE = "run_metadata.json"
SUMMARY_FILE = "summary.txt"
TOP_KEYS = {"groups", "n_runs", "base_seeds", "hp", "env", "suite_path", "sticky_suite_path",
            "output_dir", "parallelism", "suite_params", "episode_cap"}
GROUP_KEYS = {"name", "n_runs", "base_seeds", "hp", "env"}


class ConfigError(ValueError):
    """A config field is missing, unknown or out of range."""

    def __init__(self, where: str, msg: str):
        super().__init__(f"{where}: {msg}")
        self.where = where


@dataclass
class ExperimentConfig:
    groups: list[GroupSpec]
    hp: Hyperparams = field(default_factory=Hyperparams)
    env_cfg: catch.EnvConfig = field(default_factory=catch.EnvConfig)
    suite_path: str | None = None
    sticky_suite_path: str | None = None
    output_dir: str | None = None
    parallelism: int = 1
    suite_params: SuiteParams = field(default_factory=SuiteParams)
    episode_cap: int = 200
    raw: dict = field(default_factory=dict)

    def fingerprint(self) -> str:
        blob = json.dumps({"groups": [g.to_dict() for g in self.groups],
                           "suite_path": self.suite_path,
                           "sticky_suite_path": self.sticky_suite_path},
                          sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _build(where, factory, value):
    if not isinstance(value, dict):
        raise ConfigError(where, "expected an object")
    try:
        return factory(value)
    except TypeError as exc:
        raise ConfigError(where, f"unknown or missing field ({exc})") from None
    except ValueError as exc:
        raise ConfigError(where, str(exc)) from None


def _merge(base: dict, over: dict | None, where: str) -> dict:
    if over is None:
        return dict(base)
    if not isinstance(over, dict):
        raise ConfigError(where, "expected an object")
    return {**base, **over}


def _hp_from(d, where):
    d = dict(d)
    if "hidden" in d:
        d["hidden"] = tuple(d["hidden"])
    return _build(where, Hyperparams.from_dict, d)


def parse_seed_override(text: str) -> tuple[str, int]:
    name, sep, value = text.partition("=")
    if not sep:
        raise ConfigError("--seed-override", f"expected field=u64, got {text!r}")
    valid = SeedSpec().to_dict()
    if name not in valid:
        raise ConfigError("--seed-override", f"unknown seed field {name!r}")
    try:
        seed = int(value, 0)
    except ValueError:
        raise ConfigError("--seed-override", f"{value!r} is not an integer") from None
    if not 0 <= seed <= MASK64:
        raise ConfigError("--seed-override", f"{seed} is not an unsigned 64-bit value")
    return name, seed


def parse_config(raw: dict, seed_overrides: dict | None = None) -> ExperimentConfig:
    """Validate a config document; errors name the offending field."""
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be an object")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError("config", f"unknown keys {sorted(unknown)}")
    overrides = dict(seed_overrides or {})

    seeds_d = _merge(SeedSpec().to_dict(), raw.get("base_seeds"), "base_seeds")
    env_raw = raw.get("env") or {}
    if isinstance(env_raw, dict) and "env_instance_seed" in env_raw \
            and "env_instance_seed" not in (raw.get("base_seeds") or {}):
        seeds_d["env_instance_seed"] = env_raw["env_instance_seed"]
    hp_d = _merge(Hyperparams().to_dict(), raw.get("hp"), "hp")
    env_d = _merge(catch.EnvConfig().to_dict(), raw.get("env"), "env")
    hp = _hp_from(hp_d, "hp")
    env_cfg = _build("env", catch.EnvConfig.from_dict, env_d)

    n_runs = raw.get("n_runs", 5)
    if not isinstance(n_runs, int) or n_runs < 1:
        raise ConfigError("n_runs", "must be a positive integer")
    parallelism = raw.get("parallelism", 1)
    if not isinstance(parallelism, int) or parallelism < 0:
        raise ConfigError("parallelism", "must be a nonnegative integer")

    group_entries = raw.get("groups", list(GROUP_NAMES))
    if not isinstance(group_entries, list) or not group_entries:
        raise ConfigError("groups", "must be a nonempty list")
    groups, seen = [], set()
    for k, entry in enumerate(group_entries):
        where = f"groups[{k}]"
        if isinstance(entry, str):
            entry = {"name": entry}
        if not isinstance(entry, dict) or "name" not in entry:
            raise ConfigError(where, "expected a group name or an object with 'name'")
        bad = set(entry) - GROUP_KEYS
        if bad:
            raise ConfigError(where, f"unknown keys {sorted(bad)}")
        name = entry["name"]
        if name not in GROUP_NAMES:
            raise ConfigError(f"{where}.name", f"unknown group {name!r}; expected one of {GROUP_NAMES}")
        if name in seen:
            raise ConfigError(f"{where}.name", f"group {name!r} listed twice")
        seen.add(name)
        g_seeds = {**_merge(seeds_d, entry.get("base_seeds"), f"{where}.base_seeds"), **overrides}
        seeds = _build(f"{where}.base_seeds", SeedSpec.from_dict, g_seeds)
        g_hp = _hp_from(_merge(hp.to_dict(), entry.get("hp"), f"{where}.hp"), f"{where}.hp")
        g_env = _build(f"{where}.env", catch.EnvConfig.from_dict,
                       _merge(env_cfg.to_dict(), entry.get("env"), f"{where}.env"))
        g_env = replace(g_env, env_instance_seed=seeds.env_instance_seed)
        g_runs = entry.get("n_runs", n_runs)
        if not isinstance(g_runs, int) or g_runs < 1:
            raise ConfigError(f"{where}.n_runs", "must be a positive integer")
        spec = GroupSpec.standard(name, seeds, g_runs, g_hp, g_env)
        try:
            build_group_configs(spec)
        except ValueError as exc:
            raise ConfigError(where, str(exc)) from None
        groups.append(spec)

    suite_params = _build("suite_params", lambda d: SuiteParams(**d),
                          _merge(SuiteParams().to_dict(), raw.get("suite_params"), "suite_params"))
    episode_cap = raw.get("episode_cap", 200)
    if not isinstance(episode_cap, int) or episode_cap < 1:
        raise ConfigError("episode_cap", "must be a positive integer")
    for key in ("suite_path", "sticky_suite_path", "output_dir"):
        if raw.get(key) is not None and not isinstance(raw[key], str):
            raise ConfigError(key, "must be a string or null")
    return ExperimentConfig(groups, hp, env_cfg, raw.get("suite_path"), raw.get("sticky_suite_path"),
                            raw.get("output_dir"), parallelism, suite_params, episode_cap, raw)


def load_config(path, seed_overrides: dict | None = None) -> ExperimentConfig:
    if path is None:
        return parse_config({}, seed_overrides)
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"{path} is not valid JSON: {exc}") from None
    return parse_config(raw, seed_overrides)


def _load_suite(path, kind: str) -> EvalSuite:
    if path is None:
        return reference.load_sticky_suite() if kind == STICKY_SEEDS else reference.load_start_suite()
    where = "sticky_suite_path" if kind == STICKY_SEEDS else "suite_path"
    if not os.path.isfile(path):
        raise ConfigError(where, f"suite file {path} does not exist")
    try:
        suite = EvalSuite.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(where, f"cannot load suite {path}: {exc}") from None
    if suite.kind != kind:
        raise ConfigError(where, f"suite {path} is of kind {suite.kind!r}, need {kind!r}")
    return suite


def _resolve_out(flag, cfg: ExperimentConfig | None = None) -> Path:
    out = flag or (cfg.output_dir if cfg else None) or os.environ.get(OUTPUT_ENV_VAR)
    if not out:
        raise ConfigError("--out", f"no output directory (use --out or {OUTPUT_ENV_VAR})")
    return Path(out)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(text)


def _write_metadata(out: Path, command: str, started: datetime.datetime, extra: dict) -> None:
    """Wall-clock details live only in this sidecar, never in the outputs."""
    doc = {"command": command, "artifact_version": __version__,
           "started": started.isoformat(),
           "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(), **extra}
    _write(out / METADATA_FILE, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _summary_text(reports: list[GroupReport], fingerprint: str) -> str:
    return (f"# detrl {__version__} config {fingerprint}\n" + summary_table(reports))


def cmd_train(args) -> int:
    started = datetime.datetime.now(datetime.timezone.utc)
    overrides = dict(parse_seed_override(s) for s in args.seed_override or [])
    cfg = load_config(args.config, overrides)
    out = _resolve_out(args.out, cfg)
    if args.parallelism is not None:
        if args.parallelism < 0:
            raise ConfigError("--parallelism", "must be >= 0")
        cfg.parallelism = args.parallelism
    suites = {}
    for g in cfg.groups:
        kind = STICKY_SEEDS if g.env_cfg.sticky_p > 0 else START_STATES
        if kind not in suites:
            path = cfg.sticky_suite_path if kind == STICKY_SEEDS else cfg.suite_path
            suites[kind] = _load_suite(path, kind)

    fingerprint = cfg.fingerprint()
    reports, diverged = [], 0
    for g in cfg.groups:
        suite = suites[STICKY_SEEDS if g.env_cfg.sticky_p > 0 else START_STATES]
        log.info("group %s: %d runs", g.name, g.n_runs)
        logs = run_configs(build_group_configs(g), suite, cfg.parallelism)
        for i, lg in enumerate(logs):
            _write(out / g.name / f"run_{i}.json", lg.to_json())
            if lg.outcome == DIVERGED:
                diverged += 1
                log.warning("group %s run %d diverged: %s", g.name, i, lg.diagnostic)
        report = group_report(g.name, logs)
        reports.append(report)
        _write(out / g.name / "report.json", report.to_json())
        _write(out / g.name / "report.csv", report.to_csv())
    _write(out / SUMMARY_FILE, _summary_text(reports, fingerprint))
    _write(out / "experiment.json", json.dumps(
        {"artifact_version": __version__, "config_fingerprint": fingerprint,
         "groups": [g.to_dict() for g in cfg.groups]}, indent=1, sort_keys=True) + "\n")
    _write_metadata(out, "train", started, {"config_fingerprint": fingerprint,
                                            "parallelism": resolve_parallelism(cfg.parallelism)})
    if diverged:
        print(f"warning: {diverged} run(s) diverged; their logs are kept", file=sys.stderr)
    print(_summary_text(reports, fingerprint), end="")
    return EXIT_OK


def cmd_verify(args) -> int:
    try:
        a, b = RunLog.load(args.log_a), RunLog.load(args.log_b)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: cannot read run log: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    try:
        verdict = compare_runs(a, b)
    except IncomparableError as exc:
        print(f"incomparable: {exc}")
        return EXIT_BAD_INPUT
    print(verdict)
    return EXIT_OK if verdict.identical else EXIT_NEGATIVE


def cmd_gen_suite(args) -> int:
    started = datetime.datetime.now(datetime.timezone.utc)
    cfg = load_config(args.config)
    if args.seed is None or not 0 <= args.seed <= MASK64:
        raise ConfigError("--seed", "an unsigned 64-bit seed is required")
    try:
        ranker = load_network(args.ranker) if args.ranker else reference.load_ranker()
    except (OSError, ValueError) as exc:
        raise ConfigError("--ranker", f"cannot load ranker network: {exc}") from None
    env_cfg = replace(cfg.env_cfg, sticky_p=0.0)
    if ranker.layer_sizes[0] != env_cfg.feature_size:
        raise ConfigError("--ranker", f"network input {ranker.layer_sizes[0]} does not fit "
                                      f"the environment's {env_cfg.feature_size} features")
    try:
        suite = make_start_state_suite(ranker, args.seed, env_cfg, cfg.suite_params, cfg.episode_cap)
    except SuiteGenerationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NEGATIVE
    out = Path(args.out) if args.out else _resolve_out(None, cfg) / "suite.json"
    _write(out, suite.to_json())
    _write_metadata(out.parent, "gen-suite", started, {"suite": out.name,
                                                      "suite_digest": suite.digest()})
    print(f"wrote {len(suite)} start sequences to {out} (digest {suite.digest()})")
    return EXIT_OK


def _band_csv(report: GroupReport) -> str:
    lines = [f"# group={report.name} version={__version__} "
             f"fingerprints={','.join(report.fingerprints)}"]
    rows = [["step", "mean", "mean_minus_std", "mean_plus_std"]]
    for step, s in report.per_interval:
        rows.append([step, repr(s.mean), repr(s.mean - s.std), repr(s.mean + s.std)])
    return "\n".join(lines + [",".join(map(str, r)) for r in rows]) + "\n"


def _start_state_csv(name: str, logs: list[RunLog]) -> str:
    rows = [f"# group={name} version={__version__} "
            f"fingerprints={','.join(lg.config_fingerprint for lg in logs)}",
            "run,entry,step,score"]
    for r, lg in enumerate(logs):
        for entry, curve in enumerate(per_start_state_curve(lg)):
            rows.extend(f"{r},{entry},{step},{score!r}" for step, score in curve)
    return "\n".join(rows) + "\n"


def cmd_report(args) -> int:
    out = _resolve_out(args.out)
    if not out.is_dir():
        print(f"error: {out} is not a directory", file=sys.stderr)
        return EXIT_NEGATIVE
    reports = []
    for name in GROUP_NAMES:
        gdir = out / name
        if not (gdir / "report.json").is_file():
            continue
        with open(gdir / "report.json") as f:
            report = GroupReport.from_dict(json.load(f))
        run_files = sorted(gdir.glob("run_*.json"), key=lambda p: int(p.stem.split("_")[1]))
        logs = [RunLog.load(p) for p in run_files]
        if logs:
            report = group_report(name, logs)
        reports.append(report)
        _write(gdir / "band.csv", _band_csv(report))
        _write(gdir / "start_states.csv", _start_state_csv(name, logs))
    if not reports:
        print(f"error: no group reports under {out}", file=sys.stderr)
        return EXIT_NEGATIVE
    fingerprint = hashlib.sha256(
        ",".join(fp for r in reports for fp in r.fingerprints).encode()).hexdigest()[:16]
    text = _summary_text(reports, fingerprint)
    _write(out / SUMMARY_FILE, text)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="detrl", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"detrl {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the configured groups and write logs and reports")
    t.add_argument("--config", help="experiment config (JSON); defaults to all six groups")
    t.add_argument("--out", help=f"output directory (fallback: ${OUTPUT_ENV_VAR})")
    t.add_argument("--parallelism", type=int, help="worker processes, 0 = one per CPU")
    t.add_argument("--seed-override", action="append", metavar="FIELD=U64",
                   help="override one base seed for every group; repeatable")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify", help="compare two run logs exactly")
    v.add_argument("log_a")
    v.add_argument("log_b")
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("gen-suite", help="generate a start-state evaluation suite")
    g.add_argument("--config", help="config supplying env and suite_params")
    g.add_argument("--ranker", help="ranker network file (default: the shipped ranker)")
    g.add_argument("--seed", type=lambda s: int(s, 0), required=True)
    g.add_argument("--out", help="suite file to write")
    g.set_defaults(func=cmd_gen_suite)

    r = sub.add_parser("report", help="export plot data and the summary table")
    r.add_argument("--out", help=f"training output directory (fallback: ${OUTPUT_ENV_VAR})")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_BAD_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
