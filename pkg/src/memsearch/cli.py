"""memsearch command-line interface.

    memsearch <pretrain|search|finetune|evaluate|attack|pareto|transfer|report> --config PATH [flags]

Every artifact goes under ``output_dir/run_id/``; ``manifest.json`` there
lists the sha256 of each file and is rewritten after every command.
Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .checkpoint import file_sha256, load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config
from .corpus import Dataset, hpo_subsample
from .denoiser import FULL_FT, SPACES, Mask, effective_params, trainable_count, total_param_count
from .errors import (CheckpointError, ConfigError, DecompositionError, DivergenceError, EmptyResultError,
                     MaskError, MemSearchError, SingularScheduleError, TransferError, VocabError)
from .evaluation import (MaskEvaluator, attack, attack_delta, full_metrics, metrics_row, read_metrics_csv,
                         write_metrics_csv)
from .metrics import Objectives
from .mitigation import MitigationConfig
from .search import (SearchConfig, TrialLog, analyze_mask, check_transferable, format_analysis, load_mask,
                     merge_fronts, pareto_front, read_trial_log, run_search, save_mask, select_scalarized)
from .training import pretrain, train_inner

log = logging.getLogger("memsearch")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
THETA0 = "theta0.ckpt"
METRICS_FILE = "metrics.csv"
MANIFEST = "manifest.json"
BASELINES = {
    "freeze": (),
    "full": FULL_FT,
    "spectral_full": (Mask.ones("spectral"),),
    "scale_full": (Mask.ones("scale_shift"),),
    "attention_full": (Mask.ones("attention"),),
}
REPORT_COLUMNS = ("rank", "run_id", "mask_space", "mask_bits", "d_mem", "d_fid", "amd", "extracted_count",
                  "prompt_fidelity", "seed", "scalarized", "pareto_optimal", "mask_summary")
SCATTER_COLUMNS = ("space", "trial_id", "generation", "bits", "d_mem", "d_fid", "status", "on_front")


class UsageError(MemSearchError):
    """Bad command-line usage or missing prerequisite; exit code 2."""


class PopcountObjectives:
    """Stub evaluator for dry runs: bit-position-weighted popcount pair.

    d_mem grows with the selected bits, d_fid with the unselected ones, so
    the Pareto set is known by enumeration.
    """

    def __init__(self, n_bits: int):
        self.w_on = np.arange(1, n_bits + 1, dtype=np.float64)
        self.w_off = np.arange(n_bits, 0, -1, dtype=np.float64) ** 2 / n_bits

    def __call__(self, mask: Mask, seed: int) -> Objectives:
        bits = mask.array
        return Objectives(float(bits @ self.w_on), float((1 - bits) @ self.w_off))


# ------------------------------------------------------------------ files


def _run_dir(cfg: RunConfig) -> str:
    os.makedirs(cfg.run_dir, exist_ok=True)
    return cfg.run_dir


def write_manifest(run_dir: str, cfg: RunConfig | None = None) -> dict:
    files = {}
    for root, _, names in os.walk(run_dir):
        for name in names:
            path = os.path.join(root, name)
            rel = os.path.relpath(path, run_dir).replace(os.sep, "/")
            if rel != MANIFEST:
                files[rel] = file_sha256(path)
    data = {"format": "memsearch-manifest", "version": 1, "memsearch_version": __version__,
            "run_id": None if cfg is None else cfg.run_id, "seed": None if cfg is None else cfg.seed,
            "files": dict(sorted(files.items()))}
    with open(os.path.join(run_dir, MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(data, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return data


def _write_json(path, data) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_csv(path, columns, rows, header_line: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_line:
            fh.write(header_line + "\n")
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in columns})


def _load_theta0(cfg: RunConfig, path: str | None = None):
    path = path or os.path.join(cfg.run_dir, THETA0)
    if not os.path.exists(path):
        raise UsageError(f"checkpoint {path} not found; run `memsearch pretrain` first")
    params, masks, _ = load_checkpoint(path, cfg.arch)
    return params, masks


def _upsert_metrics(path, row: dict) -> None:
    """Replace any row with the same label so reruns leave the file unchanged."""
    rows = read_metrics_csv(path) if os.path.exists(path) else []
    rows = [r for r in rows if r["run_id"] != row["run_id"]] + [row]
    write_metrics_csv(path, rows)


def _label(name: str, mitigation: MitigationConfig) -> str:
    return name if mitigation.kind == "none" else f"{name}+{mitigation.kind}"


def _safe(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_+." else "_" for ch in label)


# ------------------------------------------------------------------ commands


def cmd_pretrain(cfg: RunConfig, args) -> dict:
    run_dir = _run_dir(cfg)
    base = cfg.base_corpus_data()
    params, history = pretrain(cfg.arch, Dataset.from_samples(base.train), cfg.vocab(), cfg.schedule.build(),
                               cfg.pretrain, init_seed=cfg.pretrain_init_seed)
    digest = save_checkpoint(os.path.join(run_dir, THETA0), params)
    _write_csv(os.path.join(run_dir, "pretrain_loss.csv"), ("step", "loss"),
               ({"step": r["step"], "loss": repr(float(r["loss"]))} for r in history.rows()))
    print(f"pretrained {cfg.pretrain.steps} steps, final loss {history.loss[-1]:.5f}, checkpoint sha256 {digest}")
    return {"checkpoint": digest}


def _search_space(cfg: RunConfig, args, space: str) -> tuple:
    """Run one search; returns (SearchResult, search config)."""
    from dataclasses import replace

    run_dir = cfg.run_dir
    if args.dry_objectives:
        scfg = replace(cfg.search, space="toy", n_bits=args.dry_bits)
        evaluator = PopcountObjectives(args.dry_bits)
    else:
        scfg = replace(cfg.search, space=space)
        theta0, _ = _load_theta0(cfg)
        corpus = cfg.mem_corpus()
        hpo = hpo_subsample(corpus, cfg.corpus["hpo_fraction"], cfg.corpus["hpo_seed"])
        evaluator = MaskEvaluator(theta0, Dataset.from_samples(hpo), corpus, cfg.schedule.build(), cfg.inner_train,
                                  cfg.metrics)
    trial_log = TrialLog(os.path.join(run_dir, f"trials_{scfg.space}.jsonl"), scfg, cfg.reproducible)

    def on_trial(rec):
        trial_log.append(rec)
        obj = "failed" if rec.objectives is None else f"d_mem={rec.objectives.d_mem:.5f} d_fid={rec.objectives.d_fid:.5f}"
        log.info("%s trial %d %s %s %s", scfg.space, rec.trial_id, rec.mask.bitstring(), rec.status, obj)

    workers = args.workers if args.workers is not None else cfg.workers
    result = run_search(scfg, evaluator, workers=workers, on_trial=on_trial)
    return result, scfg


def _front_json(front, source_run: str) -> dict:
    return {"format": "memsearch-pareto", "version": 1, "source_run": source_run,
            "members": [{"space": t.mask.space, "trial_id": t.trial_id, "bits": list(t.mask.bits),
                         "d_mem": t.objectives.d_mem, "d_fid": t.objectives.d_fid,
                         "scalarized": t.scalarized()} for t in front]}


def _scatter_rows(trials, front) -> list:
    on = {(t.mask.space, t.trial_id) for t in front}
    return [{"space": t.mask.space, "trial_id": t.trial_id, "generation": t.generation, "bits": t.mask.bitstring(),
             "d_mem": "" if t.objectives is None else repr(t.objectives.d_mem),
             "d_fid": "" if t.objectives is None else repr(t.objectives.d_fid),
             "status": t.status, "on_front": int((t.mask.space, t.trial_id) in on)} for t in trials]


def _finish_search(cfg: RunConfig, trials, front, normalize: bool) -> dict:
    run_dir = cfg.run_dir
    if not front:
        raise EmptyResultError("search produced no successful trials")
    _write_json(os.path.join(run_dir, "pareto.json"), _front_json(front, cfg.run_id))
    _write_csv(os.path.join(run_dir, "scatter.csv"), SCATTER_COLUMNS, _scatter_rows(trials, front))
    best = select_scalarized(front, normalize)
    save_mask(os.path.join(run_dir, "best_mask.json"), best.mask, cfg.run_id, best.scalarized())
    print(f"front of {len(front)}; best {best.mask.space} mask {best.mask.bitstring()} "
          f"d_mem={best.objectives.d_mem:.5f} d_fid={best.objectives.d_fid:.5f}")
    return {"best": best, "front": front, "trials": trials}


def cmd_search(cfg: RunConfig, args) -> dict:
    _run_dir(cfg)
    spaces = list(SPACES) if args.space == "all" and not args.dry_objectives else [args.space or cfg.search.space]
    if args.dry_objectives:
        spaces = ["toy"]
    trials, fronts = [], []
    normalize = cfg.search.normalize
    for space in spaces:
        result, _ = _search_space(cfg, args, space)
        trials += result.trials
        if result.front:
            fronts.append(result.front)
    front = merge_fronts(*fronts) if fronts else []
    return _finish_search(cfg, trials, front, normalize)


def cmd_pareto(cfg: RunConfig, args) -> dict:
    """Recompute the front from the trial logs on disk."""
    run_dir = cfg.run_dir
    logs = sorted(f for f in os.listdir(run_dir) if f.startswith("trials_") and f.endswith(".jsonl")) \
        if os.path.isdir(run_dir) else []
    if args.log:
        logs = [os.path.relpath(p, run_dir) if os.path.isabs(p) else p for p in args.log]
    if not logs:
        raise UsageError(f"no trial logs in {run_dir}")
    trials, fronts = [], []
    for name in logs:
        _, recs = read_trial_log(os.path.join(run_dir, name))
        trials += recs
        if any(t.ok for t in recs):
            fronts.append(pareto_front(recs))
    front = merge_fronts(*fronts)
    for t in front:
        print(f"{t.mask.space:12s} trial {t.trial_id:3d} {t.mask.bitstring()} "
              f"d_mem={t.objectives.d_mem:.5f} d_fid={t.objectives.d_fid:.5f}")
    return _finish_search(cfg, trials, front, cfg.search.normalize)


def _resolve_masks(args) -> tuple:
    if args.mask and args.baseline:
        raise UsageError("--mask and --baseline are mutually exclusive")
    if args.mask:
        mask, meta = load_mask(args.mask)
        return (mask,), str(meta.get("source_run") or os.path.splitext(os.path.basename(args.mask))[0])
    baseline = args.baseline or "full"
    return BASELINES[baseline], baseline


def _mitigated(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "mitigation", None):
        from dataclasses import replace

        return cfg.with_mitigation(replace(cfg.mitigation, kind=args.mitigation))
    return cfg


def _finetune(cfg: RunConfig, theta0, masks, corpus):
    if not masks or all(m.popcount() == 0 for m in masks):
        return theta0.with_zero_deltas(), None
    params, history = train_inner(theta0, masks, Dataset.from_samples(corpus.train_augmented), corpus.vocab,
                                  cfg.schedule.build(), cfg.train, calib=Dataset.from_samples(corpus.val))
    return params, history


def _evaluate_and_record(cfg: RunConfig, params, masks, corpus, label: str) -> dict:
    values = full_metrics(effective_params(params, masks), corpus, cfg.schedule.build(), cfg.metrics)
    row = metrics_row(label, masks, values, cfg.train.seed)
    _upsert_metrics(os.path.join(cfg.run_dir, METRICS_FILE), row)
    print(" ".join(f"{k}={row[k]}" for k in ("run_id", "d_mem", "d_fid", "amd", "extracted_count",
                                              "prompt_fidelity")))
    return row


def cmd_finetune(cfg: RunConfig, args) -> dict:
    masks, name = _resolve_masks(args)
    cfg = _mitigated(cfg, args)
    label = args.label or _label(name, cfg.mitigation)
    run_dir = _run_dir(cfg)
    theta0, _ = _load_theta0(cfg)
    corpus = cfg.mem_corpus()
    params, history = _finetune(cfg, theta0, masks, corpus)
    digest = save_checkpoint(os.path.join(run_dir, f"model_{_safe(label)}.ckpt"), params, masks)
    if history is not None:
        _write_csv(os.path.join(run_dir, f"train_loss_{_safe(label)}.csv"), ("step", "loss", "flagged"),
                   ({"step": r["step"], "loss": repr(float(r["loss"])), "flagged": r["flagged"]}
                    for r in history.rows()))
    row = _evaluate_and_record(cfg, params, masks, corpus, label)
    return {"row": row, "checkpoint": digest, "params": params, "masks": masks}


def cmd_transfer(cfg: RunConfig, args) -> dict:
    """Apply a mask searched elsewhere to this config's corpus and model."""
    if not args.mask:
        raise UsageError("transfer needs --mask")
    mask, meta = load_mask(args.mask)
    check_transferable(mask, cfg.arch)
    cfg = _mitigated(cfg, args)
    run_dir = _run_dir(cfg)
    label = args.label or _label(f"transfer:{meta.get('source_run')}", cfg.mitigation)
    theta0, _ = _load_theta0(cfg)
    corpus = cfg.mem_corpus()
    params, _ = _finetune(cfg, theta0, (mask,), corpus)
    save_checkpoint(os.path.join(run_dir, f"model_{_safe(label)}.ckpt"), params, (mask,))
    row = _evaluate_and_record(cfg, params, (mask,), corpus, label)
    return {"row": row}


def cmd_evaluate(cfg: RunConfig, args) -> dict:
    _run_dir(cfg)
    path = args.checkpoint or os.path.join(cfg.run_dir, THETA0)
    params, masks = _load_theta0(cfg, path)
    label = args.label or os.path.splitext(os.path.basename(path))[0]
    row = _evaluate_and_record(cfg, params, masks, cfg.mem_corpus(), label)
    return {"row": row}


def cmd_attack(cfg: RunConfig, args) -> dict:
    run_dir = _run_dir(cfg)
    path = args.checkpoint or os.path.join(cfg.run_dir, THETA0)
    params, masks = _load_theta0(cfg, path)
    model = effective_params(params, masks)
    corpus = cfg.mem_corpus()
    sched = cfg.schedule.build()
    delta = attack_delta(corpus, cfg.metrics)
    controls = corpus.test[: cfg.corpus["n_controls"]]
    dup = attack(model, corpus, corpus.mem_subset, sched, cfg.metrics, delta)
    ctrl = attack(model, corpus, controls, sched, cfg.metrics, delta)
    for rep in (dup, ctrl):
        rep.validate(corpus.image_shape, cfg.metrics.tile)
    label = args.label or os.path.splitext(os.path.basename(path))[0]
    data = {"format": "memsearch-attack", "version": 1, "checkpoint": os.path.basename(path),
            "checkpoint_sha256": file_sha256(path), "delta": delta, "tile": cfg.metrics.tile,
            "image_shape": list(corpus.image_shape),
            "duplicated": dict(dup.to_dict(), prompt_ids=[s.id for s in corpus.mem_subset]),
            "control": dict(ctrl.to_dict(), prompt_ids=[s.id for s in controls])}
    _write_json(os.path.join(run_dir, f"attack_{_safe(label)}.json"), data)
    print(f"extracted duplicated={dup.extracted_count}/{dup.n_prompts} control={ctrl.extracted_count}/{ctrl.n_prompts}"
          f" (delta={delta:.5f})")
    return {"duplicated": dup, "control": ctrl}


def _row_masks(row: dict) -> tuple:
    if row["mask_space"] in ("", "none"):
        return ()
    return tuple(Mask(s, tuple(int(c) for c in b)) for s, b in zip(row["mask_space"].split("+"),
                                                                      row["mask_bits"].split("+")))


def _mask_summary(row: dict, cfg: RunConfig) -> str:
    try:
        masks = _row_masks(row)
    except (MaskError, ValueError):
        return ""
    if len(masks) == 1:
        return format_analysis(analyze_mask(masks[0], cfg.arch))
    count = trainable_count(cfg.arch, masks)
    total = total_param_count(cfg.arch)
    return f"{row['mask_space'] or 'none'}: {count} of {total} parameters ({100 * count / total:.3f}%)"


def build_report(rows: list, cfg: RunConfig) -> list:
    """Rows sorted by scalarized score with Pareto-optimal rows marked."""
    if not rows:
        raise EmptyResultError("no metrics rows")
    from .search import dominates

    pts = [(r["d_mem"], r["d_fid"]) for r in rows]
    out = []
    for r, p in zip(rows, pts):
        out.append(dict(r, scalarized=(p[0] + p[1]) / 2.0,
                        pareto_optimal=int(not any(dominates(q, p) for q in pts)),
                        mask_summary=_mask_summary(r, cfg)))
    out.sort(key=lambda r: (r["scalarized"], r["d_mem"], r["run_id"]))
    for i, r in enumerate(out, start=1):
        r["rank"] = i
    return out


def format_table(rows: list) -> str:
    cols = [c for c in REPORT_COLUMNS if c != "mask_summary"]

    def cell(v):
        return f"{v:.5f}" if isinstance(v, float) else str(v)

    cells = [[cell(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r, row in zip(rows, cells):
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
        if r["mask_summary"]:
            lines.append("    " + r["mask_summary"])
    return "\n".join(lines) + "\n"


def cmd_report(cfg: RunConfig, args) -> dict:
    run_dir = args.run_dir or cfg.run_dir
    path = os.path.join(run_dir, METRICS_FILE)
    if not os.path.exists(path):
        raise UsageError(f"no metrics rows in {run_dir}")
    rows = build_report(read_metrics_csv(path), cfg)
    _write_csv(os.path.join(run_dir, "report.csv"), REPORT_COLUMNS,
               ({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()} for r in rows))
    text = format_table(rows)
    with open(os.path.join(run_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")
    return {"rows": rows}


COMMANDS = {
    "pretrain": cmd_pretrain,
    "search": cmd_search,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "attack": cmd_attack,
    "pareto": cmd_pareto,
    "transfer": cmd_transfer,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memsearch", description="Mask search against diffusion memorization.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="run configuration (INI)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    add("pretrain", "train the base model on the base corpus")
    p = add("search", "NSGA-II mask search")
    p.add_argument("--space", choices=SPACES + ("all",), default=None)
    p.add_argument("--dry-objectives", choices=("popcount",), default=None,
                   help="stub evaluator over a toy mask space (no training)")
    p.add_argument("--dry-bits", type=int, default=3)
    p.add_argument("--workers", type=int, default=None)
    for name, help_text in (("finetune", "fine-tune under a mask or baseline and score it"),
                            ("transfer", "apply a mask from another run to this corpus")):
        p = add(name, help_text)
        p.add_argument("--mask", default=None, help="mask JSON file")
        if name == "finetune":
            p.add_argument("--baseline", choices=tuple(BASELINES), default=None)
        p.add_argument("--mitigation", choices=("none", "rwa", "threshold"), default=None)
        p.add_argument("--label", default=None, help="metrics row label")
    for name, help_text in (("evaluate", "score a checkpoint"), ("attack", "run the extraction attack")):
        p = add(name, help_text)
        p.add_argument("--checkpoint", default=None, help="defaults to the run's base checkpoint")
        p.add_argument("--label", default=None)
    p = add("pareto", "recompute the Pareto front from trial logs")
    p.add_argument("--log", action="append", default=None, help="trial log (repeatable)")
    p = add("report", "collate metrics rows into a comparison table")
    p.add_argument("--run-dir", default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "dry_bits", 1) < 1:
        print("error: --dry-bits must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if getattr(args, "workers", None) is not None and args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_run_config(args.config)
        COMMANDS[args.command](cfg, args)
        write_manifest(cfg.run_dir if args.command != "report" or not args.run_dir else args.run_dir, cfg)
    except (DivergenceError, FloatingPointError, DecompositionError, SingularScheduleError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, CheckpointError, TransferError, MaskError, EmptyResultError, VocabError,
            FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MemSearchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - keep the documented exit-code set
        log.debug("unhandled failure", exc_info=True)
        print(f"failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
