"""Batch command line front end.

Subjects are paired across input roles by file stem (``sub01.nii`` in every
role is subject ``sub01``).  Every command writes its outputs atomically per
file and exits with status 0 only when every subject succeeded.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import glob
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path


from . import __version__
from .errors import ConsensusSegError, EmptyInput
from .io import (
    atomic_write,
    csv_bytes,
    load_mask,
    load_volume,
    pgm16_bytes,
    save_volume,
    volume_stem,
)
from .metrics import CSV_HEADER, METRIC_NAMES, EvalRecord, error_volumes, evaluate, projection_heatmap
from .morphology import largest_component
from .preprocess import PATCH_PRESETS, PatchSpec, fuse_triplanar, sample_patches, threshold_prob
from .staple import StapleConfig, binarize, majority_vote, staple_fuse
from .stats import (
    aggregate_report,
    report_csv_rows,
    report_markdown,
    significance_csv_rows,
    significance_image,
)
from .volgrid import AXES, ValueKind, write_raw

log = logging.getLogger("consensus_seg")

EXIT_FAILURE = 2
EMPTY_MASK_SENTINEL = "EmptyMask"


class ConfigError(Exception):
    pass


class SubjectError(Exception):
    """A failure confined to one subject; the message names subject and role."""


# --------------------------------------------------------------------------
# configuration


@dataclass
class PipelineConfig:
    out: Path = Path("out")
    seed: int = 0
    threads: int = 1
    keep_going: bool = False
    connectivity: int = 26
    threshold: float = 0.5
    staple: StapleConfig = field(default_factory=StapleConfig)
    patch: PatchSpec = field(default_factory=PatchSpec)
    raters: dict = field(default_factory=dict)  # role name -> glob
    methods: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)  # truth, axial, coronal, sagittal, image, brain, records
    reference: str | None = None
    axis: str | None = None


def _parse_role(spec: str) -> tuple:
    name, sep, pattern = spec.partition("=")
    if not sep or not name or not pattern:
        raise ConfigError(f"expected NAME=GLOB, got {spec!r}")
    return name.strip(), pattern.strip()


def _read_config_file(path: Path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if not cp.read(path):
        raise ConfigError(f"cannot read config file {path}")
    base = path.parent
    for section in ("raters", "methods", "inputs"):
        if cp.has_section(section):
            for key, value in cp.items(section):
                if not os.path.isabs(value):
                    cp.set(section, key, str(base / value))
    return cp


def build_config(args: argparse.Namespace) -> PipelineConfig:
    cp = _read_config_file(Path(args.config)) if args.config else configparser.ConfigParser()

    def pick(flag, section, key, cast, default):
        if flag is not None:
            return flag
        if cp.has_option(section, key):
            return cast(cp.get(section, key))
        return default

    def as_bool(text):
        return str(text).strip().lower() in ("1", "true", "yes", "on")

    cfg = PipelineConfig()
    cfg.out = Path(pick(args.out, "global", "out", str, "out"))
    cfg.seed = pick(args.seed, "global", "seed", int, 0)
    cfg.threads = max(1, pick(args.threads, "global", "threads", int, 1))
    cfg.keep_going = bool(args.keep_going) or (cp.has_option("global", "keep_going") and as_bool(cp.get("global", "keep_going")))
    cfg.connectivity = pick(args.connectivity, "global", "connectivity", int, 26)
    if cfg.connectivity not in (6, 26):
        raise ConfigError("connectivity must be 6 or 26")
    cfg.threshold = pick(args.threshold, "global", "threshold", float, 0.5)
    if not 0 < cfg.threshold < 1:
        raise ConfigError("threshold must lie in (0, 1)")

    staple_opts = dict(cp.items("staple")) if cp.has_section("staple") else {}
    staple_opts["threshold"] = cfg.threshold
    try:
        cfg.staple = StapleConfig.from_mapping(staple_opts)
    except ValueError as exc:
        raise ConfigError(f"[staple] {exc}") from None

    patch_opts = dict(cp.items("patch")) if cp.has_section("patch") else {}
    preset = getattr(args, "preset", None) or patch_opts.get("preset")
    h, w, k = PATCH_PRESETS[preset] if preset else (128, 128, 3)
    if "size" in patch_opts:
        h, w = (int(v) for v in patch_opts["size"].lower().split("x"))
    h, w = getattr(args, "size", None) or (h, w)
    k = getattr(args, "per_slice", None) or int(patch_opts.get("per_slice", k))
    try:
        cfg.patch = PatchSpec((h, w), k, cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    for section, target, flag in (("raters", cfg.raters, getattr(args, "rater", None)),
                                  ("methods", cfg.methods, getattr(args, "method", None))):
        if flag:
            target.update(_parse_role(s) for s in flag)
        elif cp.has_section(section):
            target.update(cp.items(section))
    if cp.has_section("inputs"):
        cfg.inputs.update(cp.items("inputs"))
    for key in ("truth", "axial", "coronal", "sagittal", "image", "brain", "records"):
        value = getattr(args, key, None)
        if value is not None:
            cfg.inputs[key] = value
    cfg.reference = getattr(args, "reference", None) or (cp.get("eval", "reference") if cp.has_option("eval", "reference") else None)
    cfg.axis = getattr(args, "axis", None) or (cp.get("global", "axis") if cp.has_option("global", "axis") else None)
    return cfg


def collect_subjects(roles: dict) -> tuple:
    """Map each role's glob to ``{subject: path}``; return (subjects, per-role maps).

    Two files with the same stem in one role, or one file claimed by two
    roles, is a configuration error.
    """
    by_role = {}
    owner = {}
    for role, pattern in roles.items():
        files = {}
        for path in sorted(glob.glob(pattern)):
            stem = volume_stem(path)
            if stem in files:
                raise ConfigError(f"role {role!r}: subject {stem!r} matches both {files[stem]} and {path}")
            real = os.path.realpath(path)
            if real in owner and owner[real] != role:
                raise ConfigError(f"file {path} is claimed by roles {owner[real]!r} and {role!r}")
            owner[real] = role
            files[stem] = path
        if not files:
            raise ConfigError(f"role {role!r}: no files match {pattern!r}")
        by_role[role] = files
    subjects = sorted(set().union(*(f.keys() for f in by_role.values())))
    return subjects, by_role


def _require(by_role: dict, subject: str, role: str) -> str:
    path = by_role[role].get(subject)
    if path is None:
        raise SubjectError(f"subject {subject}: role {role}: missing input file")
    return path


def _run_subjects(cfg: PipelineConfig, subjects: list, work) -> tuple:
    """Run ``work(subject)`` over subjects in a pool; return (results in subject order, failures)."""
    results, failures = {}, []

    def guarded(subject):
        try:
            return subject, work(subject), None
        except SubjectError as exc:
            return subject, None, str(exc)
        except (ConsensusSegError, ValueError, OSError) as exc:
            return subject, None, f"subject {subject}: {type(exc).__name__}: {exc}"

    outcomes = []
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        futures = [pool.submit(guarded, s) for s in subjects]
        for fut in futures:
            if fut.cancelled():
                continue
            outcomes.append(fut.result())
            if outcomes[-1][2] is not None and not cfg.keep_going:
                for pending in futures:
                    pending.cancel()
    for subject, value, error in outcomes:
        if error is None:
            results[subject] = value
        else:
            log.error("[%s] %s", subject, error)
            failures.append(error)
    return [results[s] for s in subjects if s in results], failures


# --------------------------------------------------------------------------
# commands


def cmd_fuse(cfg: PipelineConfig) -> int:
    if len(cfg.raters) < 2:
        raise ConfigError("fuse needs at least two --rater NAME=GLOB roles")
    subjects, by_role = collect_subjects(cfg.raters)
    names = list(cfg.raters)

    def work(subject):
        masks = [load_mask(_require(by_role, subject, role)) for role in names]
        res = staple_fuse(masks, cfg.staple)
        mask = binarize(res.weights, cfg.threshold)
        if mask.data.any():
            mask = largest_component(mask, cfg.connectivity)
        else:
            log.warning("[%s] thresholded STAPLE mask is empty", subject)
        out = cfg.out
        save_volume(out / f"{subject}_staple_prob.nii", res.weights)
        save_volume(out / f"{subject}_staple_mask.nii", mask)
        save_volume(out / f"{subject}_mv_mask.nii", majority_vote(masks))
        rows = [["rater", "sensitivity", "specificity"]]
        rows += [[role, repr(perf.p), repr(perf.q)] for role, perf in zip(names, res.performances)]
        atomic_write(out / f"{subject}_performance.csv", csv_bytes(rows))
        log.info("[%s] STAPLE %d iterations, converged=%s", subject, res.iterations, res.converged)
        return res

    _, failures = _run_subjects(cfg, subjects, work)
    return EXIT_FAILURE if failures else 0


def cmd_fuse_triplanar(cfg: PipelineConfig) -> int:
    roles = {r: cfg.inputs[r] for r in ("axial", "coronal", "sagittal") if r in cfg.inputs}
    if len(roles) != 3:
        raise ConfigError("fuse-triplanar needs --axial, --coronal and --sagittal")
    subjects, by_role = collect_subjects(roles)

    def work(subject):
        vols = [load_volume(_require(by_role, subject, r), ValueKind.PROBABILITY) for r in ("axial", "coronal", "sagittal")]
        prob = fuse_triplanar(*vols)
        mask = threshold_prob(prob, cfg.threshold)
        final = largest_component(mask, cfg.connectivity) if mask.data.any() else mask
        save_volume(cfg.out / f"{subject}_triplanar_prob.nii", prob)
        save_volume(cfg.out / f"{subject}_triplanar_thresh.nii", mask)
        save_volume(cfg.out / f"{subject}_triplanar_mask.nii", final)

    _, failures = _run_subjects(cfg, subjects, work)
    return EXIT_FAILURE if failures else 0


def _format_metric(x: float) -> str:
    return EMPTY_MASK_SENTINEL if math.isnan(x) else repr(float(x))


def _parse_metric(text: str) -> float:
    return math.nan if text == EMPTY_MASK_SENTINEL else float(text)


def record_rows(records: list) -> list:
    rows = [list(CSV_HEADER)]
    for subject, method, rec in records:
        rows.append([subject, method] + [_format_metric(v) for v in rec.as_tuple()])
    return rows


def read_records(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ConfigError(f"{path}: expected header {','.join(CSV_HEADER)}")
        return [(row["subject"], row["method"], EvalRecord(*(_parse_metric(row[m]) for m in METRIC_NAMES)))
                for row in reader]


def _write_report(cfg: PipelineConfig, records: list) -> None:
    try:
        report = aggregate_report(records, cfg.reference)
    except EmptyInput as exc:
        raise ConfigError(str(exc)) from None
    atomic_write(cfg.out / "report.md", report_markdown(report).encode("utf-8"))
    atomic_write(cfg.out / "report.csv", csv_bytes(report_csv_rows(report)))
    atomic_write(cfg.out / "significance.csv", csv_bytes(significance_csv_rows(report)))
    atomic_write(cfg.out / "significance.pgm", pgm16_bytes(significance_image(report)))


def cmd_eval(cfg: PipelineConfig) -> int:
    if "truth" not in cfg.inputs or not cfg.methods:
        raise ConfigError("eval needs --truth GLOB and at least one --method NAME=GLOB")
    roles = {"truth": cfg.inputs["truth"], **{f"method:{m}": g for m, g in cfg.methods.items()}}
    subjects, by_role = collect_subjects(roles)

    def work(subject):
        truth = load_mask(_require(by_role, subject, "truth"))
        rows = []
        for method in cfg.methods:
            seg = load_mask(_require(by_role, subject, f"method:{method}"))
            rows.append((subject, method, evaluate(truth, seg)))
        return rows

    per_subject, failures = _run_subjects(cfg, subjects, work)
    records = [r for rows in per_subject for r in rows]
    atomic_write(cfg.out / "records.csv", csv_bytes(record_rows(records)))
    if records:
        _write_report(cfg, records)
    return EXIT_FAILURE if failures else 0


def cmd_stats(cfg: PipelineConfig) -> int:
    if "records" not in cfg.inputs:
        raise ConfigError("stats needs --records CSV")
    records = read_records(cfg.inputs["records"])
    if not records:
        raise ConfigError("records file is empty")
    _write_report(cfg, records)
    return 0


def cmd_heatmap(cfg: PipelineConfig) -> int:
    if "truth" not in cfg.inputs or not cfg.methods:
        raise ConfigError("heatmap needs --truth GLOB and at least one --method NAME=GLOB")
    axes = AXES if cfg.axis in (None, "all") else (cfg.axis,)
    roles = {"truth": cfg.inputs["truth"], **{f"method:{m}": g for m, g in cfg.methods.items()}}
    subjects, by_role = collect_subjects(roles)

    def work(subject):
        truth = load_mask(_require(by_role, subject, "truth"))
        errs = {}
        for method in cfg.methods:
            seg = load_mask(_require(by_role, subject, f"method:{method}"))
            if seg.dims != truth.dims:
                raise SubjectError(f"subject {subject}: role method:{method}: ShapeMismatch "
                                   f"{seg.dims} vs truth {truth.dims}")
            errs[method] = error_volumes(truth, seg)
        return truth.dims, truth.spacing, errs

    per_subject, failures = _run_subjects(cfg, subjects, work)
    if failures:
        return EXIT_FAILURE
    if not per_subject:
        return 0
    grids = {dims for dims, _, _ in per_subject}
    if len(grids) > 1:
        log.error("heatmap inputs are on different grids %s; register them to a common space first", sorted(grids))
        return EXIT_FAILURE
    if len({sp for _, sp, _ in per_subject}) > 1:
        log.warning("subjects have different voxel spacings; heat maps assume co-registered inputs")
    log.info("heat maps assume all subjects are already registered to a common space")
    for method in cfg.methods:
        fps = [errs[method][0] for _, _, errs in per_subject]
        fns = [errs[method][1] for _, _, errs in per_subject]
        for axis in axes:
            for name, stack in (("fp", fps), ("fn", fns)):
                plane = projection_heatmap(stack, axis)
                atomic_write(cfg.out / method / f"{name}_{axis}.pgm", pgm16_bytes(plane))
                atomic_write(cfg.out / method / f"{name}_{axis}.raw", write_raw(plane.T))
    return 0


def cmd_patches(cfg: PipelineConfig) -> int:
    roles = {r: cfg.inputs[r] for r in ("image", "brain") if r in cfg.inputs}
    if len(roles) != 2:
        raise ConfigError("patches needs --image GLOB and --brain GLOB")
    axis = cfg.axis or "z"
    if axis not in AXES:
        raise ConfigError("patches needs a single axis x, y or z")
    subjects, by_role = collect_subjects(roles)

    def work(subject):
        image = load_volume(_require(by_role, subject, "image"))
        brain = load_mask(_require(by_role, subject, "brain"))
        patches = sample_patches(image, brain, axis, cfg.patch)
        rows = [["axis", "slice", "row0", "col0", "file"]]
        counters = {}
        for patch in patches:
            ax, k, r, c = patch.origin
            i = counters.get(k, 0)
            counters[k] = i + 1
            name = f"{ax}{k:04d}_{i:02d}"
            atomic_write(cfg.out / subject / f"{name}.raw", write_raw(patch.pixels.T))
            atomic_write(cfg.out / subject / f"{name}_mask.raw", write_raw(patch.mask_pixels.T))
            rows.append([ax, k, r, c, f"{name}.raw"])
        atomic_write(cfg.out / subject / "manifest.csv", csv_bytes(rows))
        return len(patches)

    _, failures = _run_subjects(cfg, subjects, work)
    return EXIT_FAILURE if failures else 0


COMMANDS = {
    "fuse": cmd_fuse,
    "fuse-triplanar": cmd_fuse_triplanar,
    "eval": cmd_eval,
    "heatmap": cmd_heatmap,
    "patches": cmd_patches,
    "stats": cmd_stats,
}


def _global_options(suppress: bool) -> argparse.ArgumentParser:
    # the subcommand copy must not overwrite values given before the subcommand
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS if suppress else None)
    g = common.add_argument_group("global options")
    g.add_argument("--config", help="flat [section] key = value config file")
    g.add_argument("--out", help="output directory")
    g.add_argument("--seed", type=int, help="seed for patch sampling")
    g.add_argument("--threads", type=int, help="subjects processed in parallel")
    g.add_argument("--keep-going", action="store_true", help="continue after a subject fails")
    g.add_argument("--connectivity", type=int, choices=(6, 26), help="3-D connectivity for cleanup")
    g.add_argument("--threshold", type=float, help="foreground threshold (value >= t)")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="consensus-seg", description=__doc__.splitlines()[0],
                                     parents=[_global_options(False)])
    common = _global_options(True)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuse", parents=[common], help="STAPLE silver-standard masks from rater masks")
    p.add_argument("--rater", action="append", metavar="NAME=GLOB", help="one rater role (repeatable)")

    p = sub.add_parser("fuse-triplanar", parents=[common], help="average three per-plane probability maps")
    p.add_argument("--axial")
    p.add_argument("--coronal")
    p.add_argument("--sagittal")

    p = sub.add_parser("eval", parents=[common], help="metrics, report and significance tables")
    p.add_argument("--truth", metavar="GLOB")
    p.add_argument("--method", action="append", metavar="NAME=GLOB")
    p.add_argument("--reference", help="reference method for significance tests")

    p = sub.add_parser("heatmap", parents=[common], help="normalised FP/FN projection maps")
    p.add_argument("--truth", metavar="GLOB")
    p.add_argument("--method", action="append", metavar="NAME=GLOB")
    p.add_argument("--axis", choices=AXES + ("all",))

    p = sub.add_parser("patches", parents=[common], help="random patches from brain-containing slices")
    p.add_argument("--image", metavar="GLOB")
    p.add_argument("--brain", metavar="GLOB")
    p.add_argument("--axis", choices=AXES)
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--per-slice", type=int)
    p.add_argument("--preset", choices=sorted(PATCH_PRESETS))

    p = sub.add_parser("stats", parents=[common], help="report and significance from records.csv")
    p.add_argument("--records", metavar="CSV")
    p.add_argument("--reference")
    return parser


def _setup_logging() -> None:
    level = getattr(logging, os.environ.get("CONSENSUS_SEG_LOG", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(level)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = build_config(args)
        cfg.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"consensus-seg: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
