"""Command-line entry point: ``decoylink <subcommand> [--config FILE] [--key.sub VALUE ...]``.

Exit codes: 0 completed, 2 configuration error, 3 input error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .core import Dataset, Schema, block_datasets, load_dataset, load_pair, write_dataset
from .errors import ConfigError, DecoyLinkError, InputError, NumericalError
from .evaluation import Confusion, assess_estimator, confusion_pairs, sensitivity, true_fdp
from .fdp import (UNDEFINED, FdpConfig, LinkerConfig, fmt_value, read_curve_csv, run_procedure,
                  write_report)
from .linker import EmConfig, fit_fs_model, model_summary, score_pairs, select_links, write_linked_pairs
from .simgen import SimulationSpec, generate_population, read_truth, write_truth
from .synth import SynthConfig, fit_synthesiser, sample_synthetic, synth_quality_auc, tune_synthesiser

log = logging.getLogger("decoylink")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3, 4


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: RunConfig, outputs: list[str], extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": json.loads(cfg.to_json()),
        "outputs": {name: _sha256(out / name) for name in outputs},
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _schema(cfg: RunConfig, path_a: str) -> Schema:
    names = cfg["schema.variables"]
    if names is None:
        try:
            with open(path_a, newline="", encoding="utf-8") as fh:
                header = [h.strip() for h in next(csv.reader(fh), [])]
        except OSError as exc:
            raise InputError(f"cannot read {path_a}: {exc}") from exc
        names = [h for h in header if h and h != cfg["schema.id_column"]]
        if not names:
            raise InputError(f"{path_a}: no linkage variables found in header")
    schema = Schema.from_names(names)
    for key in ("blocking.variable",):
        if cfg[key] is not None and cfg[key] not in schema.names:
            raise ConfigError(f"{key} = {cfg[key]!r} is not a schema variable")
    for name in cfg["synth.variable_order"] or ():
        if name not in schema.names:
            raise ConfigError(f"synth.variable_order names unknown variable {name!r}")
    return schema


def _load_inputs(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    path_a, path_b = cfg["input.a"], cfg["input.b"]
    if path_a is None or path_b is None:
        raise ConfigError("input.a and input.b are required")
    return load_pair(path_a, path_b, _schema(cfg, path_a), cfg["schema.id_column"])


def _load_b(cfg: RunConfig) -> Dataset:
    path_b = cfg["input.b"]
    if path_b is None:
        raise ConfigError("input.b is required")
    return load_dataset(path_b, _schema(cfg, path_b), id_column=cfg["schema.id_column"])


def _em(cfg: RunConfig) -> EmConfig:
    return EmConfig(max_iter=cfg["linker.max_iter"], rel_tol=cfg["linker.rel_tol"])


def _synth(cfg: RunConfig, b: Dataset) -> SynthConfig:
    if cfg["synth.tune"]:
        chosen = tune_synthesiser(b, folds=cfg["synth.folds"], seed=cfg["synth.seed"],
                                  variable_order=cfg["synth.variable_order"])
        log.info("tuned synthesiser: gamma %s, max_context %s", chosen.gamma, chosen.max_context)
        return chosen
    return SynthConfig(cfg["synth.gamma"], cfg["synth.max_context"], cfg["synth.variable_order"])


def cmd_simulate(cfg: RunConfig) -> int:
    sim = cfg.section("sim")
    if sim["cardinalities"] is None:
        sim.pop("cardinalities")
    spec = SimulationSpec(**sim)
    a, b, truth = generate_population(spec)
    out = _out_dir(cfg)
    write_dataset(a, out / "A.csv")
    write_dataset(b, out / "B.csv")
    write_truth(truth, out / "truth.csv")
    write_manifest(out, "simulate", cfg, ["A.csv", "B.csv", "truth.csv"],
                   {"n_links": int(len(truth.links)),
                    "cardinalities": [int(len(p)) for p in truth.marginals]})
    print(f"wrote {len(a)} A rows, {len(b)} B rows and {len(truth.links)} true links to {out}")
    return EXIT_OK


def cmd_synthesize(cfg: RunConfig) -> int:
    b = _load_b(cfg)
    synth_cfg = _synth(cfg, b)
    s = fit_synthesiser(b, synth_cfg)
    n = cfg["synth.n"] if cfg["synth.n"] is not None else len(b)
    synthetic = sample_synthetic(s, n, cfg["synth.seed"])
    out = _out_dir(cfg)
    write_dataset(synthetic, out / "synthetic.csv", cfg["schema.id_column"], with_origin=True)
    q = synth_quality_auc(b, synthetic, cfg["synth.folds"], synth_cfg, seed=cfg["synth.seed"])
    (out / "synth_report.txt").write_text(
        f"records: {q.n_real} real, {q.n_synth} synthetic\n"
        f"gamma: {synth_cfg.gamma}, max_context: {synth_cfg.max_context}\n"
        f"variable order: {', '.join(b.schema.names[k] for k in s.variable_order)}\n"
        f"AUC real vs synthetic: {q.auc:.4f}\n", encoding="utf-8")
    write_manifest(out, "synthesize", cfg, ["synthetic.csv", "synth_report.txt"])
    print(f"wrote {n} synthetic records; AUC real vs synthetic {q.auc:.4f}")
    return EXIT_OK


def cmd_link(cfg: RunConfig) -> int:
    a, b = _load_inputs(cfg)
    threads = cfg.resolved_threads()
    blocking = block_datasets(a, b, cfg["blocking.variable"]) if cfg["blocking.variable"] else None
    model = fit_fs_model(a, b, _em(cfg), blocking, threads)
    scores = score_pairs(model, a, b, blocking, cfg["linker.score_floor"], threads)
    result = select_links(scores, cfg["linker.xi"])
    out = _out_dir(cfg)
    write_linked_pairs(result, a, b, out / "linked_pairs.csv")
    (out / "model_summary.txt").write_text(model_summary(model, a.schema.names), encoding="utf-8")
    outputs = ["linked_pairs.csv", "model_summary.txt"]
    if blocking is not None:
        (out / "blocking_report.txt").write_text(blocking.report() + "\n", encoding="utf-8")
        outputs.append("blocking_report.txt")
    write_manifest(out, "link", cfg, outputs)
    print(f"{len(result)} links at xi = {cfg['linker.xi']} after {model.n_iter} EM iterations")
    return EXIT_OK


def cmd_estimate_fdp(cfg: RunConfig) -> int:
    if cfg["fdp.seed_base"] is None:
        raise ConfigError("fdp.seed_base is required (set it or pass --seed)")
    a, b = _load_inputs(cfg)
    fdp_cfg = FdpConfig(alpha=cfg["fdp.alpha"], xi_grid=cfg["fdp.xi_grid"], repeats=cfg["fdp.repeats"],
                        seed_base=cfg["fdp.seed_base"], aggregation_rule=cfg["fdp.aggregation_rule"],
                        target=cfg["fdp.target"])
    linker_cfg = LinkerConfig(_em(cfg), cfg["linker.score_floor"], cfg["blocking.variable"],
                              cfg.resolved_threads())
    result = run_procedure(a, b, linker_cfg, _synth(cfg, b), fdp_cfg)
    out = _out_dir(cfg)
    outputs = []
    for rep in result.repeats:
        if not rep.ok:
            continue
        name = f"fdp_curve_r{rep.repeat}.csv"
        rep.curve.write_csv(out / name)
        pairs = f"linked_pairs_r{rep.repeat}.csv"
        with open(out / pairs, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["a_id", "b_id", "score", "b_origin"])
            L = rep.links
            for i, bid, d, syn in zip(L.i, rep.b_ids, L.d, L.synthetic):
                w.writerow([a.source_id[i], bid, repr(float(d)), "synthetic" if syn else "real"])
        outputs += [name, pairs]
    if result.aggregate is not None:
        result.aggregate.write_csv(out / "fdp_aggregate.csv")
        outputs.append("fdp_aggregate.csv")
    text = write_report(result, fdp_cfg, out / "report.txt")
    outputs.append("report.txt")
    write_manifest(out, "estimate-fdp", cfg, outputs)
    sys.stdout.write(text)
    return EXIT_OK


def _id_index(path: str, id_column: str) -> dict[str, int]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or id_column not in reader.fieldnames:
                raise InputError(f"{path}: missing id column {id_column!r}")
            return {rec[id_column].strip(): k for k, rec in enumerate(reader)}
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def read_links_file(path, ids_a: dict[str, int], ids_b: dict[str, int]):
    """Real linked pairs as row indices plus scores; synthetic rows are dropped."""
    i, j, d = [], [], []
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                if rec.get("b_origin", "real") == "synthetic":
                    continue
                a_id, b_id = rec["a_id"].strip(), rec["b_id"].strip()
                if a_id not in ids_a:
                    raise InputError(f"{path}: unknown A id {a_id!r}")
                if b_id not in ids_b:
                    raise InputError(f"{path}: unknown B id {b_id!r}")
                i.append(ids_a[a_id])
                j.append(ids_b[b_id])
                d.append(float(rec["score"]))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    except KeyError as exc:
        raise InputError(f"{path}: missing column {exc}") from exc
    return np.asarray(i, dtype=np.int64), np.asarray(j, dtype=np.int64), np.asarray(d, dtype=np.float64)


def cmd_evaluate(cfg: RunConfig) -> int:
    if cfg["eval.truth"] is None:
        raise ConfigError("eval.truth is required")
    if (cfg["eval.links"] is None) == (cfg["eval.fdp_dir"] is None):
        raise ConfigError("set exactly one of eval.links and eval.fdp_dir")
    if cfg["input.a"] is None or cfg["input.b"] is None:
        raise ConfigError("input.a and input.b are required to resolve record ids")
    truth = read_truth(cfg["eval.truth"])
    ids_a = _id_index(cfg["input.a"], cfg["schema.id_column"])
    ids_b = _id_index(cfg["input.b"], cfg["schema.id_column"])
    if len(ids_a) != len(truth.entity_a) or len(ids_b) != len(truth.entity_b):
        raise InputError("truth file and input files have different numbers of rows")

    if cfg["eval.links"] is not None:
        link_files = [Path(cfg["eval.links"])]
        curves = None
        grid = cfg["fdp.xi_grid"]
    else:
        d = Path(cfg["eval.fdp_dir"])
        curve_files = sorted(d.glob("fdp_curve_r*.csv"), key=lambda p: int(p.stem.split("_r")[-1]))
        if not curve_files:
            raise InputError(f"{d}: no fdp_curve_r<k>.csv files")
        curves = [read_curve_csv(p) for p in curve_files]
        link_files = [d / p.name.replace("fdp_curve", "linked_pairs") for p in curve_files]
        grid = [r.xi for r in curves[0].rows]

    per_run: list[list[Confusion]] = []
    for path in link_files:
        i, j, score = read_links_file(path, ids_a, ids_b)
        per_run.append([confusion_pairs(i[score > xi], j[score > xi], truth, xi) for xi in grid])

    def mean_of(values):
        vals = [v for v in values if v is not None]
        return sum(vals) / len(vals) if vals else None

    truth_fdp = [[true_fdp(c) for c in run] for run in per_run]
    hat = assess_estimator(curves, truth_fdp, "fdp_hat").rows if curves else None
    prob = assess_estimator(curves, truth_fdp, "prob_fdp").rows if curves else None
    out = _out_dir(cfg)
    with open(out / "assessment.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["xi", "tp", "fp", "fn", "true_fdp", "sensitivity", "fdp_hat_bias", "prob_fdp_bias", "rmse"])
        for k, xi in enumerate(grid):
            cs = [run[k] for run in per_run]
            counts = [mean_of([getattr(c, f) for c in cs]) for f in ("tp", "fp", "fn")]
            if len(cs) == 1:
                counts = [int(v) for v in counts]
            w.writerow([fmt_value(xi), *(fmt_value(v) for v in counts), fmt_value(mean_of([true_fdp(c) for c in cs])),
                        fmt_value(mean_of([sensitivity(c) for c in cs])),
                        fmt_value(hat[k].bias) if hat else UNDEFINED, fmt_value(prob[k].bias) if prob else UNDEFINED,
                        fmt_value(hat[k].rmse) if hat else UNDEFINED])
    lines = [f"runs evaluated: {len(per_run)}", f"true pairs: {per_run[0][0].tp + per_run[0][0].fn}"]
    first = per_run[0][0]
    lines.append(f"at xi = {grid[0]:.2f}: tp {first.tp}, fp {first.fp}, fn {first.fn}, "
                 f"true FDP {fmt_value(true_fdp(first))}")
    if hat:
        used = [r for r in hat if r.bias is not None]
        if used:
            lines.append(f"fdp_hat bias: mean {np.mean([r.bias for r in used]):.4f}, "
                         f"max |bias| {max(abs(r.bias) for r in used):.4f} over {len(used)} thresholds")
        excluded = sum(r.n_excluded for r in hat)
        if excluded:
            lines.append(f"undefined estimate or truth cells excluded: {excluded}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_manifest(out, "evaluate", cfg, ["assessment.csv", "summary.txt"])
    print("\n".join(lines))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "synthesize": cmd_synthesize,
    "link": cmd_link,
    "estimate-fdp": cmd_estimate_fdp,
    "evaluate": cmd_evaluate,
}


def _overrides(extra: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    k = 0
    while k < len(extra):
        tok = extra[k]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if k + 1 >= len(extra):
                raise ConfigError(f"missing value for {tok}")
            k += 1
            value = extra[k]
        out[key] = value
        k += 1
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decoylink", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int, help="sets sim.seed, synth.seed and fdp.seed_base")
    p.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _overrides(extra)
        if args.seed is not None:
            for key in ("sim.seed", "synth.seed", "fdp.seed_base"):
                overrides.setdefault(key, str(args.seed))
        if args.threads is not None:
            overrides["threads"] = str(args.threads)
        if args.out is not None:
            overrides["output.dir"] = args.out
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DecoyLinkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
