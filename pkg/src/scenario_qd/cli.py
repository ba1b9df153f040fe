"""Command-line front end: run, compare, heatmap, resume.

Configs are flat ``key = value`` text with dotted sections, for example::

    algorithm = cma-mae
    domain = teleop
    budget = 5000
    archive.resolution = 25,25
    domain.trials = 5

Every run writes ``manifest``, ``archive.csv``, ``stats.csv``, ``heatmap.pgm``
and ``checkpoint/`` into its output directory. The manifest is itself a config
with every default filled in, so ``run --config OUT/manifest`` repeats the run.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import pickle
import sys
import tempfile
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .archive import ArchiveConfig, GridArchive
from .domains import DOMAINS, Domain, Plateau, SphereLP, Teleop, TeleopConstants, make_domain
from .scheduler import ALGORITHMS, EvaluationError, ExperimentConfig, RunStats, Search
from .surrogate import DsageConfig, TrainConfig, dsage_run

log = logging.getLogger("scenario_qd")

CLI_ALGORITHMS = ALGORITHMS + ("dsage",)
OUTPUT_FILES = {"archive": "archive.csv", "stats": "stats.csv", "heatmap": "heatmap.pgm", "checkpoint": "checkpoint"}


class ConfigError(ValueError):
    pass


# -- value parsing ------------------------------------------------------------


def _none_or(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def inner(text: str):
        return None if text.strip().lower() in ("none", "") else parse(text)

    return inner


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _str(text: str) -> str:
    return text.strip()


def _fmt(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


# key -> (parser, default)
TOP_KEYS: dict[str, tuple[Callable[[str], Any], Any]] = {
    "algorithm": (_str, "cma-mae"),
    "domain": (_str, "sphere-lp"),
    "budget": (int, 10_000),
    "seed": (int, 0),
    "emitters": (_none_or(int), None),
    "batch_size": (_none_or(int), None),
    "sigma": (_none_or(float), None),
    "gradient.sigma": (float, 1.0),
    "gradient.step": (float, 1.0),
    "archive.resolution": (_ints, (25, 25)),
    "archive.learning_rate": (_none_or(float), None),
    "archive.threshold_floor": (float, 0.0),
    "target.qd_score": (_none_or(float), None),
    "target.coverage": (_none_or(float), None),
    "checkpoint.every": (int, 0),
}

_DSAGE_DEFAULTS = DsageConfig()
_TRAIN_DEFAULTS = TrainConfig()
DSAGE_KEYS: dict[str, tuple[Callable[[str], Any], Any]] = {
    "dsage.outer_iterations": (int, _DSAGE_DEFAULTS.outer_iterations),
    "dsage.bootstrap": (int, _DSAGE_DEFAULTS.bootstrap),
    "dsage.inner_budget": (int, _DSAGE_DEFAULTS.inner_budget),
    "dsage.downsample_size": (int, _DSAGE_DEFAULTS.downsample_size),
    "dsage.inner_algorithm": (_str, _DSAGE_DEFAULTS.inner_algorithm),
    "dsage.inner_emitters": (int, _DSAGE_DEFAULTS.inner_emitters),
    "dsage.inner_batch_size": (int, _DSAGE_DEFAULTS.inner_batch_size),
    "dsage.use_occupancy": (_bool, _DSAGE_DEFAULTS.use_occupancy),
    "dsage.epochs": (int, _TRAIN_DEFAULTS.epochs),
    "dsage.train_batch_size": (int, _TRAIN_DEFAULTS.batch_size),
    "dsage.train_learning_rate": (float, _TRAIN_DEFAULTS.learning_rate),
    "dsage.momentum": (float, _TRAIN_DEFAULTS.momentum),
    "dsage.occupancy_weight": (float, _TRAIN_DEFAULTS.occupancy_weight),
}

META_KEYS = ("meta.version",) + tuple(f"meta.output.{k}" for k in OUTPUT_FILES)


def domain_defaults(name: str) -> dict[str, Any]:
    """Constructor options of a domain with their default values."""
    if name == "teleop":
        return dataclasses.asdict(TeleopConstants())
    if name == "sphere-lp":
        d = SphereLP()
        return {"dim": d.dim, "sigma": d.spec.default_sigma}
    if name == "plateau":
        d = Plateau()
        return {"dim": d.dim, "bound": d.bound, "sigma": d.spec.default_sigma}
    raise ConfigError(f"unknown domain {name!r}; expected one of {DOMAINS}")


def domain_options(domain: Domain) -> dict[str, Any]:
    if isinstance(domain, Teleop):
        return dataclasses.asdict(domain.c)
    if isinstance(domain, SphereLP):
        return {"dim": domain.dim, "sigma": domain.spec.default_sigma}
    if isinstance(domain, Plateau):
        return {"dim": domain.dim, "bound": domain.bound, "sigma": domain.spec.default_sigma}
    raise ConfigError(f"cannot describe domain {domain.spec.name!r}")


def _parser_for(default: Any) -> Callable[[str], Any]:
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return _str


# -- config files ----------------------------------------------------------------


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        raw[key] = value
    return raw


def parse_overrides(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


@dataclasses.dataclass(frozen=True)
class RunManifest:
    """Fully resolved description of one run."""

    experiment: ExperimentConfig
    dsage: DsageConfig | None
    checkpoint_every: int
    version: str = __version__

    @property
    def algorithm(self) -> str:
        return "dsage" if self.dsage is not None else self.experiment.algorithm

    def build_domain(self) -> Domain:
        return make_domain(self.experiment.domain, **self.experiment.domain_options)

    def archive_config(self, domain: Domain) -> ArchiveConfig:
        return self.experiment.archive_config(domain)

    def to_text(self) -> str:
        e = self.experiment
        values: dict[str, Any] = {
            "meta.version": self.version,
            "algorithm": self.algorithm,
            "domain": e.domain,
            "budget": e.budget,
            "seed": e.seed,
            "emitters": e.emitters,
            "batch_size": e.batch_size,
            "sigma": e.sigma,
            "gradient.sigma": e.gradient_sigma,
            "gradient.step": e.gradient_step,
            "archive.resolution": e.resolution,
            "archive.learning_rate": e.learning_rate,
            "archive.threshold_floor": e.threshold_floor,
            "target.qd_score": e.target_qd_score,
            "target.coverage": e.target_coverage,
            "checkpoint.every": self.checkpoint_every,
        }
        if self.dsage is not None:
            d, t = self.dsage, self.dsage.train
            values.update(
                {
                    "dsage.outer_iterations": d.outer_iterations,
                    "dsage.bootstrap": d.bootstrap,
                    "dsage.inner_budget": d.inner_budget,
                    "dsage.downsample_size": d.downsample_size,
                    "dsage.inner_algorithm": d.inner_algorithm,
                    "dsage.inner_emitters": d.inner_emitters,
                    "dsage.inner_batch_size": d.inner_batch_size,
                    "dsage.use_occupancy": d.use_occupancy,
                    "dsage.epochs": t.epochs,
                    "dsage.train_batch_size": t.batch_size,
                    "dsage.train_learning_rate": t.learning_rate,
                    "dsage.momentum": t.momentum,
                    "dsage.occupancy_weight": t.occupancy_weight,
                }
            )
        for k, v in sorted(e.domain_options.items()):
            values[f"domain.{k}"] = v
        for k, name in OUTPUT_FILES.items():
            values[f"meta.output.{k}"] = name
        lines = ["# scenario-qd run manifest; re-run with: scenario-qd run --config manifest"]
        lines += [f"{k} = {_fmt(v)}" for k, v in values.items()]
        return "\n".join(lines) + "\n"


def build_manifest(raw: dict[str, str]) -> RunManifest:
    """Validate raw key/value pairs and materialize every default."""
    domain_name = raw.get("domain", TOP_KEYS["domain"][1])
    dom_defaults = domain_defaults(domain_name)
    algorithm = raw.get("algorithm", TOP_KEYS["algorithm"][1])
    if algorithm not in CLI_ALGORITHMS:
        raise ConfigError(f"unknown algorithm {algorithm!r}; expected one of {CLI_ALGORITHMS}")
    known = set(TOP_KEYS) | set(META_KEYS) | {f"domain.{k}" for k in dom_defaults}
    if algorithm == "dsage":
        known |= set(DSAGE_KEYS)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    def get(table, key):
        parse, default = table[key]
        if key not in raw:
            return default
        try:
            return parse(raw[key])
        except ValueError as err:
            raise ConfigError(f"bad value for {key}: {raw[key]!r} ({err})") from None

    opts = dict(dom_defaults)
    for k, default in dom_defaults.items():
        if f"domain.{k}" in raw:
            try:
                opts[k] = _parser_for(default)(raw[f"domain.{k}"])
            except ValueError as err:
                raise ConfigError(f"bad value for domain.{k}: {err}") from None

    v = {k: get(TOP_KEYS, k) for k in TOP_KEYS}
    try:
        experiment = ExperimentConfig(
            algorithm="cma-mae" if algorithm == "dsage" else algorithm,
            domain=domain_name,
            domain_options=opts,
            resolution=v["archive.resolution"],
            learning_rate=v["archive.learning_rate"],
            threshold_floor=v["archive.threshold_floor"],
            emitters=v["emitters"],
            batch_size=v["batch_size"],
            budget=v["budget"],
            seed=v["seed"],
            sigma=v["sigma"],
            gradient_sigma=v["gradient.sigma"],
            gradient_step=v["gradient.step"],
            target_qd_score=v["target.qd_score"],
            target_coverage=v["target.coverage"],
        ).resolved()
        if experiment.sigma is None:
            experiment = dataclasses.replace(experiment, sigma=make_domain(domain_name, **opts).spec.default_sigma)
        dsage = None
        if algorithm == "dsage":
            d = {k: get(DSAGE_KEYS, k) for k in DSAGE_KEYS}
            dsage = DsageConfig(
                outer_iterations=d["dsage.outer_iterations"],
                budget=experiment.budget,
                bootstrap=d["dsage.bootstrap"],
                inner_budget=d["dsage.inner_budget"],
                downsample_size=d["dsage.downsample_size"],
                inner_algorithm=d["dsage.inner_algorithm"],
                inner_emitters=d["dsage.inner_emitters"],
                inner_batch_size=d["dsage.inner_batch_size"],
                learning_rate=experiment.learning_rate,
                resolution=experiment.resolution,
                use_occupancy=d["dsage.use_occupancy"],
                train=TrainConfig(
                    epochs=d["dsage.epochs"],
                    batch_size=d["dsage.train_batch_size"],
                    learning_rate=d["dsage.train_learning_rate"],
                    momentum=d["dsage.momentum"],
                    occupancy_weight=d["dsage.occupancy_weight"],
                ),
                seed=experiment.seed,
            )
    except ValueError as err:
        raise ConfigError(str(err)) from None
    if raw.get("meta.version", __version__) != __version__:
        log.warning("manifest was written by version %s; running %s", raw["meta.version"], __version__)
    return RunManifest(experiment, dsage, v["checkpoint.every"])


def load_manifest(path: str | Path, seed: int | None = None, overrides: Sequence[str] = ()) -> RunManifest:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    raw = parse_config_text(path.read_text(), str(path))
    raw.update(parse_overrides(overrides))
    if seed is not None:
        raw["seed"] = str(seed)
    return build_manifest(raw)


# -- outputs --------------------------------------------------------------------


def atomic_write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_outputs(out: Path, manifest: RunManifest, archive: GridArchive, stats: RunStats, n_params: int) -> None:
    atomic_write(out / "manifest", manifest.to_text())
    atomic_write(out / OUTPUT_FILES["archive"], archive.to_csv(n_params=n_params))
    atomic_write(out / OUTPUT_FILES["stats"], stats.to_csv())
    if archive.config.dims == 2:
        atomic_write(out / OUTPUT_FILES["heatmap"], archive.to_pgm())
    else:
        log.info("archive has %d measures; skipping heatmap", archive.config.dims)


def write_checkpoint(out: Path, manifest: RunManifest, search: Search) -> None:
    ckpt = out / OUTPUT_FILES["checkpoint"]
    atomic_write(ckpt / "archive.csv", search.archive.to_csv(n_params=search.domain.spec.n_params))
    atomic_write(ckpt / "state.pkl", pickle.dumps({"manifest": manifest.to_text(), "search": search}))


def _run_search(search: Search, manifest: RunManifest, out: Path) -> Search:
    every = manifest.checkpoint_every
    while not search.done():
        search.step()
        if every and search.iteration % every == 0:
            write_checkpoint(out, manifest, search)
    write_checkpoint(out, manifest, search)
    return search


def execute(manifest: RunManifest, out: Path) -> tuple[GridArchive, RunStats]:
    domain = manifest.build_domain()
    if manifest.dsage is not None:
        archive, stats = dsage_run(manifest.dsage, domain)
    else:
        # Constructing the search validates algorithm/domain compatibility before any evaluation.
        search = Search(manifest.experiment, domain)
        _run_search(search, manifest, out)
        archive, stats = search.archive, search.stats
    write_outputs(out, manifest, archive, stats, domain.spec.n_params)
    return archive, stats


# -- commands -------------------------------------------------------------------


def cmd_run(args) -> int:
    manifest = load_manifest(args.config, args.seed, args.override)
    out = Path(args.out) if args.out else Path("runs") / f"{Path(args.config).stem}-seed{manifest.experiment.seed}"
    archive, stats = execute(manifest, out)
    print(f"{manifest.algorithm}: qd_score={archive.qd_score():.6g} coverage={archive.coverage():.4f} evals={stats.evaluations} -> {out}")
    return 0


def _geometry(manifest: RunManifest) -> tuple:
    domain = manifest.build_domain()
    ac = manifest.archive_config(domain)
    return (manifest.experiment.domain, tuple(sorted(manifest.experiment.domain_options.items())), ac.lower_bounds, ac.upper_bounds, ac.resolution)


def cmd_compare(args) -> int:
    if not args.config:
        raise UsageError("compare needs at least one --config")
    manifests = [load_manifest(p, args.seed, args.override) for p in args.config]
    ref = _geometry(manifests[0])
    for path, m in zip(args.config[1:], manifests[1:]):
        if _geometry(m) != ref:
            raise ConfigError(f"{path} does not share the domain and archive layout of {args.config[0]}")
    rows = []
    for path, m in zip(args.config, manifests):
        out = Path(args.out) / Path(path).stem if args.out else Path(tempfile.mkdtemp(prefix="scenario-qd-"))
        archive, stats = execute(m, out)
        rows.append((m.algorithm, archive.qd_score(), archive.coverage(), stats.evaluations))
    lines = ["algorithm,qd_score,coverage,evals"] + [f"{a},{q!r},{c!r},{e}" for a, q, c, e in rows]
    if args.out:
        atomic_write(Path(args.out) / "compare.csv", "\n".join(lines) + "\n")
    width = max(len(r[0]) for r in rows)
    print(f"{'algorithm':<{width}}  {'qd_score':>12}  {'coverage':>8}  {'evals':>7}")
    for a, q, c, e in rows:
        print(f"{a:<{width}}  {q:>12.6g}  {c:>8.4f}  {e:>7d}")
    return 0


def cmd_heatmap(args) -> int:
    csv_path = Path(args.archive)
    cfg_path = Path(args.config) if args.config else csv_path.parent / "manifest"
    if not cfg_path.is_file():
        raise ConfigError(f"no config given and no manifest next to {csv_path}")
    manifest = load_manifest(cfg_path)
    ac = manifest.archive_config(manifest.build_domain())
    if ac.dims != 2:
        raise ConfigError(f"heatmaps need a 2-measure archive; this one has {ac.dims}")
    archive = GridArchive.from_csv(csv_path, ac)
    atomic_write(Path(args.output), archive.to_pgm())
    return 0


def cmd_resume(args) -> int:
    ckpt = Path(args.checkpoint)
    state_path = ckpt / "state.pkl" if ckpt.is_dir() else ckpt
    if not state_path.is_file():
        raise ConfigError(f"no checkpoint state at {state_path}")
    state = pickle.loads(state_path.read_bytes())
    search: Search = state["search"]
    raw = parse_config_text(state["manifest"], str(state_path))
    extra = parse_overrides(args.override)
    bad = sorted(set(extra) - {"budget"})
    if bad:
        raise ConfigError(f"only budget can be overridden on resume; got {', '.join(bad)}")
    raw.update(extra)
    manifest = build_manifest(raw)
    search.config = dataclasses.replace(search.config, budget=manifest.experiment.budget)
    out = Path(args.out) if args.out else state_path.parent.parent
    _run_search(search, manifest, out)
    write_outputs(out, manifest, search.archive, search.stats, search.domain.spec.n_params)
    print(f"resumed: qd_score={search.archive.qd_score():.6g} coverage={search.archive.coverage():.4f} evals={search.stats.evaluations} -> {out}")
    return 0


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scenario-qd", description="Quality-diversity scenario search.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, multi=False):
        if multi:
            sp.add_argument("--config", action="append", default=[], help="config file (repeat to compare)")
        else:
            sp.add_argument("--config", required=True, help="config file")
        sp.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    common(sub.add_parser("run", help="run one search"))
    common(sub.add_parser("compare", help="run several configs on paired seeds"), multi=True)
    hm = sub.add_parser("heatmap", help="render a 2-measure archive CSV as a PGM image")
    hm.add_argument("archive")
    hm.add_argument("output")
    hm.add_argument("--config", default=None, help="config describing the archive (defaults to the sibling manifest)")
    rs = sub.add_parser("resume", help="continue a run from its checkpoint")
    rs.add_argument("checkpoint")
    rs.add_argument("--out", default=None)
    rs.add_argument("--override", action="append", default=[], metavar="budget=N")
    return p


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "heatmap": cmd_heatmap, "resume": cmd_resume}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"scenario-qd: error: {err}", file=sys.stderr)
        return 2
    except ConfigError as err:
        print(f"scenario-qd: config error: {err}", file=sys.stderr)
        return 2
    except (EvaluationError, ValueError, OSError) as err:
        print(f"scenario-qd: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
