"""Command-line entry points: warmup, adapt, report.

Every artifact is a pure function of (config file, seeds): reports carry no
timestamps or machine state, checkpoints are byte-stable, and --verify
re-runs the whole pipeline into a scratch directory and compares sha256
hashes file by file.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import shutil
import sys
import tempfile
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .flashback import write_flashbacks
from .model import ModelConfig, ModelState, load_checkpoint, save_checkpoint
from .tasks import ROLES, make_suite, write_items
from .trainer import RunConfig, run, warmup


class ConfigError(ValueError):
    """Bad experiment config: unknown keys, missing fields, bad combos."""


# Flags owned by the method selector; configs may not set them directly.
_METHOD_FLAGS = {
    "sft": dict(use_jtl=False, use_pcgrad=False, use_flashbacks=False,
                replay_mode=False),
    "replay": dict(use_jtl=False, use_pcgrad=False, use_flashbacks=False,
                   replay_mode=True),
    "jfa": dict(use_jtl=True, use_pcgrad=True, use_flashbacks=True,
                replay_mode=False),
    "jfa_no_jtl": dict(use_jtl=False, use_pcgrad=True, use_flashbacks=True,
                       replay_mode=False),
    "jfa_no_pcgrad": dict(use_jtl=True, use_pcgrad=False, use_flashbacks=True,
                          replay_mode=False),
}
_SWEEP_ALPHAS = (0.1, 0.5, 1.0, 2.0, 10.0)
_RESERVED_RUN_KEYS = ("use_jtl", "use_pcgrad", "use_flashbacks", "replay_mode")

_TOP_KEYS = {"method", "warmup_checkpoint", "suite_seed", "suite_sizes",
             "model", "run"}


def _check_keys(block: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(block) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def load_experiment_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: not valid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be an object")
    _check_keys(raw, _TOP_KEYS, str(p))
    for block, cls in (("model", ModelConfig), ("run", RunConfig)):
        sub = raw.get(block, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"{p}: {block!r} must be an object")
        _check_keys(sub, {f.name for f in cls.__dataclass_fields__.values()},
                    f"{p}: {block}")
    method = raw.get("method")
    if method is not None and method not in (*_METHOD_FLAGS, "jfa_alpha_sweep"):
        raise ConfigError(
            f"unknown method {method!r}; choose one of "
            f"{sorted((*_METHOD_FLAGS, 'jfa_alpha_sweep'))}")
    if method is not None:
        clash = sorted(set(raw.get("run", {})) & set(_RESERVED_RUN_KEYS))
        if clash:
            raise ConfigError(
                f"run keys {clash} are controlled by method={method!r}; "
                "remove them from the config")
        if method == "jfa_alpha_sweep" and "alpha" in raw.get("run", {}):
            raise ConfigError("jfa_alpha_sweep drives alpha itself; "
                              "remove run.alpha from the config")
    return raw


def _model_config(raw: dict) -> ModelConfig:
    return ModelConfig(**raw.get("model", {}))


def _run_config(raw: dict, method: str | None = None,
                alpha: float | None = None) -> RunConfig:
    kwargs = dict(raw.get("run", {}))
    if method is not None:
        kwargs.update(_METHOD_FLAGS[method])
    if alpha is not None:
        kwargs["alpha"] = alpha
    return RunConfig(**kwargs)


def _suite(raw: dict):
    sizes = tuple(raw.get("suite_sizes", (2000, 200, 200)))
    if len(sizes) != 3:
        raise ConfigError(f"suite_sizes must have 3 entries, got {sizes}")
    return make_suite(int(raw.get("suite_seed", 0)), sizes=sizes)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_hashes(out: Path, names: list[str]) -> None:
    _write_json(out / "hashes.json",
                {name: _sha256(out / name) for name in sorted(names)})


def _config_hash(raw: dict) -> str:
    return hashlib.sha256(
        json.dumps(raw, sort_keys=True).encode()).hexdigest()


def _role_mean(evals: list[dict], role: str) -> float:
    vals = [e["exact_match"] for e in evals if ROLES[e["task"]] == role]
    return float(np.mean(vals))


def _write_metrics_csv(path: Path, report: dict) -> None:
    tasks = [e["task"] for e in report["after"]]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_sft_loss", "mean_div_loss",
                    *(f"em_{t}" for t in tasks), "old_mean_em", "new_mean_em"])
        for row in report["per_epoch"]:
            evals = row["evals"]
            w.writerow([
                row["epoch"],
                "" if row["mean_sft_loss"] is None else row["mean_sft_loss"],
                "" if row["mean_div_loss"] is None else row["mean_div_loss"],
                *(e["exact_match"] for e in evals),
                _role_mean(evals, "old"), _role_mean(evals, "new")])


# ----------------------------------------------------------------- pipelines


def _warmup_pipeline(raw: dict, out: Path) -> list[str]:
    """Warm up from config, write checkpoint + report + datasets; returns
    the artifact names that entered hashes.json."""
    out.mkdir(parents=True, exist_ok=True)
    model_cfg = _model_config(raw)
    run_cfg = _run_config(raw)
    suite = _suite(raw)
    old = [t for t in suite if t.spec.role == "old"]
    model = ModelState.init(model_cfg, run_cfg.seed)
    history = warmup(model, old, run_cfg)
    names: list[str] = []
    (out / "tasks").mkdir(exist_ok=True)
    for task in suite:
        for split in ("train", "val", "test"):
            rel = f"tasks/{task.spec.name}.{split}.jsonl"
            write_items(out / rel, task.spec.name, task.split(split))
            names.append(rel)
    save_checkpoint(out / "warmup.ckpt", model,
                    meta={"kind": "warmup",
                          "suite_seed": int(raw.get("suite_seed", 0)),
                          "suite_sizes": list(raw.get("suite_sizes",
                                                      (2000, 200, 200))),
                          "config_hash": _config_hash(raw)})
    names.append("warmup.ckpt")
    _write_json(out / "warmup_report.json", {
        "code_version": __version__,
        "experiment_config": raw,
        "config_hash": _config_hash(raw),
        "model_fingerprint": model.fingerprint(),
        "history": history,
        "epochs_used": len(history),
        "final_mean_val_exact_match": history[-1]["mean_val_exact_match"]})
    names.append("warmup_report.json")
    _write_hashes(out, names)
    return names


def _single_adapt(raw: dict, out: Path, method: str, run_cfg: RunConfig,
                  model_cfg: ModelConfig, suite, warm: ModelState) -> list[str]:
    out.mkdir(parents=True, exist_ok=True)
    report, model, bank, fbs = run(run_cfg, model_cfg, suite,
                                   warm_model=warm.frozen_copy())
    report = {"method": method, "experiment_config": raw, **report}
    if method == "sft":
        report["note"] = ("baseline: plain supervised fine-tuning, "
                          "forgetting expected")
    names = ["report.json", "metrics.csv", "adapted.ckpt"]
    _write_json(out / "report.json", report)
    _write_metrics_csv(out / "metrics.csv", report)
    save_checkpoint(out / "adapted.ckpt", model, bank=bank,
                    meta={"kind": "adapted", "method": method,
                          "config_hash": _config_hash(raw)})
    if fbs is not None:
        write_flashbacks(out / "flashbacks.jsonl", fbs)
        names.append("flashbacks.jsonl")
    _write_hashes(out, names)
    return names


def _adapt_pipeline(raw: dict, out: Path) -> list[str]:
    method = raw.get("method")
    if method is None:
        raise ConfigError("adapt needs a 'method' entry in the config")
    ckpt = raw.get("warmup_checkpoint")
    if ckpt is None:
        raise ConfigError("adapt needs 'warmup_checkpoint' in the config")
    if not Path(ckpt).is_file():
        raise ConfigError(f"warm-up checkpoint not found: {ckpt}")
    warm, _, meta = load_checkpoint(ckpt)
    model_cfg = _model_config(raw)
    if warm.cfg != model_cfg:
        raise ConfigError(
            f"checkpoint model config {asdict(warm.cfg)} does not match "
            f"config file model block {asdict(model_cfg)}")
    if meta and meta.get("suite_seed") is not None \
            and meta["suite_seed"] != int(raw.get("suite_seed", 0)):
        raise ConfigError(
            f"checkpoint was warmed on suite_seed {meta['suite_seed']}, "
            f"config says {raw.get('suite_seed', 0)}")
    suite = _suite(raw)
    out.mkdir(parents=True, exist_ok=True)
    if method == "jfa_alpha_sweep":
        names = []
        sweep = {}
        for alpha in _SWEEP_ALPHAS:
            sub = f"alpha_{alpha:g}"
            sub_cfg = _run_config(raw, "jfa", alpha=alpha)
            for rel in _single_adapt(raw, out / sub, "jfa", sub_cfg,
                                     model_cfg, suite, warm):
                names.append(f"{sub}/{rel}")
            sweep[sub] = alpha
        _write_json(out / "sweep.json",
                    {"alphas": list(_SWEEP_ALPHAS), "dirs": sweep})
        names.append("sweep.json")
        _write_json(out / "hashes.json",
                    {n: _sha256(out / n) for n in sorted(names)})
        return names
    run_cfg = _run_config(raw, method)
    return _single_adapt(raw, out, method, run_cfg, model_cfg, suite, warm)


def _verify(raw: dict, out: Path, pipeline) -> int:
    """Re-run the pipeline in a scratch directory; compare artifact hashes."""
    fresh = Path(tempfile.mkdtemp(prefix="flashlab-verify-"))
    try:
        names = pipeline(raw, fresh)
        bad = [n for n in names
               if _sha256(out / n) != _sha256(fresh / n)]
    finally:
        shutil.rmtree(fresh, ignore_errors=True)
    if bad:
        print(f"verify FAILED: {len(bad)} artifact(s) differ: {bad}",
              file=sys.stderr)
        return 1
    print(f"verify OK: {len(names)} artifacts reproduced byte-identically")
    return 0


# ------------------------------------------------------------------ commands


def cmd_warmup(config_path, out_dir, verify: bool) -> int:
    raw = load_experiment_config(config_path)
    out = Path(out_dir)
    _warmup_pipeline(raw, out)
    rep = json.loads((out / "warmup_report.json").read_text())
    print(f"warmup: reached val exact match "
          f"{rep['final_mean_val_exact_match']:.3f} "
          f"in {rep['epochs_used']} epoch(s); checkpoint at {out / 'warmup.ckpt'}")
    if verify:
        return _verify(raw, out, _warmup_pipeline)
    return 0


def cmd_adapt(config_path, out_dir, verify: bool) -> int:
    raw = load_experiment_config(config_path)
    out = Path(out_dir)
    _adapt_pipeline(raw, out)
    for rep_path in sorted(out.rglob("report.json")):
        rep = json.loads(rep_path.read_text())
        f = rep["forgetting"]
        print(f"{rep_path.parent.name or out.name}: method={rep['method']} "
              f"alpha={rep['config']['run']['alpha']:g} "
              f"old {f['old_em_before']:.3f}->{f['old_em_after']:.3f} "
              f"(drop {f['old_drop']:+.3f}), new {f['new_em_after']:.3f}")
    if verify:
        return _verify(raw, out, _adapt_pipeline)
    return 0


def _load_reports(run_dirs) -> list[tuple[str, dict]]:
    loaded = []
    for d in run_dirs:
        path = Path(d) / "report.json"
        try:
            rep = json.loads(path.read_text())
            rep["forgetting"]["old_em_after"]   # shape check
            rep["per_epoch"]
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
            print(f"warning: skipping {d}: {type(e).__name__}: {e}",
                  file=sys.stderr)
            continue
        loaded.append((str(d), rep))
    return loaded


def _flashback_count(rep: dict) -> int:
    rc = rep["config"]["run"]
    return rc["flashbacks_per_task"] if rc["use_flashbacks"] else 0


def cmd_report(run_dirs, out_dir) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    loaded = _load_reports(run_dirs)
    if not loaded:
        print("error: no readable reports", file=sys.stderr)
        return 1
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    cols = ["run", "method", "alpha", "n_flashbacks", "old_before",
            "old_after", "old_drop", "new_after"]
    rows = []
    for name, rep in loaded:
        f = rep["forgetting"]
        rows.append([Path(name).name, rep.get("method", "?"),
                     f"{rep['config']['run']['alpha']:g}",
                     _flashback_count(rep),
                     f"{f['old_em_before']:.4f}", f"{f['old_em_after']:.4f}",
                     f"{f['old_drop']:+.4f}", f"{f['new_em_after']:.4f}"])
    widths = [max(len(str(x)) for x in [c, *col])
              for c, col in zip(cols, zip(*rows))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(str(x).ljust(w) for x, w in zip(row, widths))
              for row in rows]
    table = "\n".join(lines) + "\n"
    print(table, end="")
    (out / "comparison.txt").write_text(table)
    with (out / "comparison.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        w.writerows(rows)

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, rep in loaded:
        curve = [_role_mean(row["evals"], "old") for row in rep["per_epoch"]]
        start = rep["forgetting"]["old_em_before"]
        ax.plot(range(len(curve) + 1), [start, *curve], marker="o",
                label=f"{Path(name).name} ({rep.get('method', '?')})")
    ax.set_xlabel("epoch")
    ax.set_ylabel("old-task mean exact match")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "forgetting_curves.png", dpi=120)
    plt.close(fig)

    alphas = sorted({float(rep["config"]["run"]["alpha"]) for _, rep in loaded})
    if len(alphas) >= 2:
        pts = sorted((float(rep["config"]["run"]["alpha"]),
                      rep["forgetting"]["old_em_after"],
                      rep["forgetting"]["new_em_after"]) for _, rep in loaded)
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.semilogx([p[0] for p in pts], [p[1] for p in pts], "o-",
                    label="old after")
        ax.semilogx([p[0] for p in pts], [p[2] for p in pts], "s--",
                    label="new after")
        ax.set_xlabel("alpha")
        ax.set_ylabel("exact match")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "alpha_sweep.png", dpi=120)
        plt.close(fig)

    counts = sorted({_flashback_count(rep) for _, rep in loaded})
    if len(counts) >= 2:
        pts = sorted((_flashback_count(rep),
                      rep["forgetting"]["old_em_after"]) for _, rep in loaded)
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-")
        ax.set_xlabel("flashbacks per task")
        ax.set_ylabel("old-task mean exact match")
        fig.tight_layout()
        fig.savefig(out / "flashback_sweep.png", dpi=120)
        plt.close(fig)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="flashlab",
        description="Continual-learning lab: warm up a tiny model on old "
                    "tasks, adapt it on new ones, compare forgetting.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in (("warmup", "train the base model on old tasks"),
                       ("adapt", "run an adaptation method from a warm "
                                 "checkpoint")):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", required=True,
                       help="experiment config (JSON)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--verify", action="store_true",
                       help="re-run and require byte-identical artifacts")
    p = sub.add_parser("report", help="tabulate and plot finished runs")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", required=True, help="output directory")
    args = parser.parse_args(argv)
    try:
        if args.command == "warmup":
            return cmd_warmup(args.config, args.out, args.verify)
        if args.command == "adapt":
            return cmd_adapt(args.config, args.out, args.verify)
        return cmd_report(args.runs, args.out)
    except (ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
