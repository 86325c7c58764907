"""Command-line front end.

Usage::

    vqseg <command> [-c run.cfg] [key=value ...]

Commands: gen-data, train, eval, perturb-study, latent-variance,
codebook-stats, bound-check.  Each writes its CSV reports and a
``resolved_config.txt`` into ``out_dir``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    bound_check,
    codebook_usage,
    compute_r,
    latent_variance_study,
    model_encoder,
    variance_heatmap_pgm,
    variance_matrix_csv,
)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, VQSegError
from .metrics import reports_to_csv
from .perturb import CALIBRATION, apply
from .runconfig import RunConfig
from .seeding import substream
from .segnet import Adam, build_model, evaluate, fit
from .synthdata import SPLITS, Corpus, generate_corpus, read_vqds, split_path

COMMANDS = ("gen-data", "train", "eval", "perturb-study", "latent-variance", "codebook-stats", "bound-check")


# ---------------------------------------------------------------- helpers
def report_header(cfg: RunConfig) -> str:
    return f"# vqseg v{__version__}\n# seed={cfg['seed']}\n# noise_calibration={CALIBRATION}\n"


def write_csv(path: Path, cfg: RunConfig, header: list[str], rows: list[list]) -> Path:
    buf = io.StringIO()
    buf.write(report_header(cfg))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())
    return path


def _f(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.6f}"


def out_dir(cfg: RunConfig) -> Path:
    p = Path(cfg["out_dir"])
    p.mkdir(parents=True, exist_ok=True)
    (p / "resolved_config.txt").write_text(cfg.dump())
    return p


def load_split(cfg: RunConfig, split: str, domain: str | None = None) -> Corpus:
    domain = domain or cfg["data.domains"][0]
    path = split_path(cfg["data.dir"], split, domain)
    if not path.exists():
        raise DataError(f"corpus file {path} not found; run gen-data first")
    return read_vqds(path)


def checkpoints(cfg: RunConfig) -> list[tuple[str, Checkpoint]]:
    paths = cfg["checkpoint"]
    if not paths:
        raise ConfigError("this command needs checkpoint=<path>[,<path>...]")
    out = []
    for p in paths:
        path = Path(p)
        if not path.exists():
            raise DataError(f"checkpoint {path} not found")
        out.append((path.stem, load_checkpoint(path)))
    return out


def model_kind(ck: Checkpoint) -> str:
    return "VQ-UNet" if ck.model.codebook is not None else "UNet"


def eval_images(cfg: RunConfig, corpus: Corpus, key: str) -> tuple[np.ndarray, np.ndarray]:
    n = cfg[key]
    n = len(corpus) if n <= 0 else min(n, len(corpus))
    return corpus.images[:n], corpus.masks[:n]


def summarise(reports) -> tuple[float, float, float, int]:
    dice = float(np.mean([r.mean_dice for r in reports]))
    hd = np.array([r.hd95 for r in reports])
    asd = np.array([r.asd for r in reports])
    finite = np.isfinite(hd)
    mean_hd = float(hd[finite].mean()) if finite.any() else math.inf
    mean_asd = float(asd[finite].mean()) if finite.any() else math.inf
    return dice, mean_hd, mean_asd, int((~finite).sum())


# ---------------------------------------------------------------- commands
def cmd_gen_data(cfg: RunConfig) -> None:
    out = out_dir(cfg)
    rows = []
    for domain in cfg["data.domains"]:
        paths = generate_corpus(cfg.corpus_spec(domain), cfg["data.dir"])
        for split in SPLITS:
            raw = paths[split].read_bytes()
            rows.append([split, domain, cfg.corpus_spec(domain).count(split), str(paths[split]),
                         hashlib.sha256(raw).hexdigest()])
    write_csv(out / "data_manifest.csv", cfg, ["split", "domain", "n", "path", "sha256"], rows)


def cmd_train(cfg: RunConfig) -> None:
    out = out_dir(cfg)
    train = load_split(cfg, "train")
    val = load_split(cfg, "val")
    resume = cfg["train.resume"]
    if resume:
        ck = load_checkpoint(resume)
        model, opt, start = ck.model, ck.optimiser, ck.epoch
        rng = ck.rng if ck.rng is not None else substream(cfg["seed"], "order")
    else:
        model = build_model(cfg.model_config())
        opt = Adam(model.parameters(), cfg.adam_config())
        start = 0
        rng = substream(cfg["seed"], "order")
    cfg.corpus_spec().validate(levels=model.config.levels)

    def log(rec):
        vd = "" if rec.val_dice is None else f" val_dice={rec.val_dice:.4f}"
        print(f"epoch {rec.epoch} loss={rec.stats.loss:.4f} codes={rec.stats.codes_used}{vd} "
              f"({rec.seconds:.1f}s)", flush=True)

    history = fit(model, opt, train, val, cfg["train.epochs"], rng, cfg["train.batch_size"],
                  cfg["train.augment"], cfg["train.reseed_dead"], cfg["train.eval_every"],
                  cfg["train.target_dice"], start, log)
    epoch = history[-1].epoch if history else start
    save_checkpoint(out / "model.vqsg", model, opt, epoch, rng, {"seed": cfg["seed"]})
    rows = []
    for rec in history:
        s = rec.stats
        rows.append([rec.epoch, f"{s.loss:.6f}", f"{s.dice_loss:.6f}", f"{s.ce_loss:.6f}",
                     f"{s.codebook_loss:.6f}", f"{s.commitment_loss:.6f}", s.codes_used, s.reseeded,
                     "" if rec.val_dice is None else f"{rec.val_dice:.6f}"])
    write_csv(out / "train_log.csv", cfg, ["epoch", "loss", "dice_loss", "ce_loss", "codebook_loss",
                                           "commitment_loss", "codes_used", "codes_reseeded", "val_dice"], rows)


def cmd_eval(cfg: RunConfig) -> None:
    out = out_dir(cfg)
    corpus = load_split(cfg, cfg["eval.split"], cfg["eval.domain"])
    images, masks = eval_images(cfg, corpus, "eval.n_images")
    rows = []
    for name, ck in checkpoints(cfg):
        reports, _ = evaluate(ck.model, images, masks, cfg["eval.spacing"])
        tag = f"{cfg['eval.split']}_{cfg['eval.domain']}"
        (out / f"eval_{name}_{tag}.csv").write_text(reports_to_csv(reports, report_header(cfg)))
        dice, hd, asd, n_inf = summarise(reports)
        rows.append([name, model_kind(ck), cfg["eval.split"], cfg["eval.domain"], len(reports),
                     _f(dice), _f(hd), _f(asd), n_inf])
    write_csv(out / "eval_summary.csv", cfg,
              ["model", "kind", "split", "domain", "n", "mean_dice", "mean_hd95", "mean_asd", "n_inf_hd95"], rows)


def cmd_perturb_study(cfg: RunConfig) -> None:
    out = out_dir(cfg)
    corpus = load_split(cfg, cfg["eval.split"], cfg["eval.domain"])
    images, masks = eval_images(cfg, corpus, "eval.n_images")
    levels = cfg["perturb.levels"]
    long_rows, wide_rows = [], []
    for name, ck in checkpoints(cfg):
        for kind in cfg["perturb.kinds"]:
            wide = [kind, name, model_kind(ck)]
            for level in levels:
                xp = apply(cfg.perturbation(kind, level), images)
                reports, _ = evaluate(ck.model, xp, masks, cfg["eval.spacing"])
                dice, hd, asd, n_inf = summarise(reports)
                long_rows.append([name, model_kind(ck), kind, f"{level:g}", _f(dice), _f(hd), _f(asd), n_inf])
                wide.append(_f(dice))
            wide_rows.append(wide)
    write_csv(out / "perturb_study.csv", cfg,
              ["model", "kind", "noise", "level", "mean_dice", "mean_hd95", "mean_asd", "n_inf_hd95"], long_rows)
    write_csv(out / "perturb_table.csv", cfg,
              ["noise", "model", "kind"] + [f"{100 * lv:g}%" for lv in levels], wide_rows)


def cmd_latent_variance(cfg: RunConfig) -> None:
    out = out_dir(cfg)
    corpus = load_split(cfg, cfg["eval.split"], cfg["eval.domain"])
    images, _ = eval_images(cfg, corpus, "perturb.n_images")
    rows = []
    for name, ck in checkpoints(cfg):
        selectors = cfg["perturb.which"] if ck.model.codebook is not None else ["pre"]
        for which in selectors:
            for kind in cfg["perturb.kinds"]:
                reports = latent_variance_study(ck.model, images, cfg.perturbation(kind, 0.0),
                                                cfg["perturb.levels"], cfg["perturb.draws"], which)
                for rep in reports:
                    stem = f"latent_variance_{name}_{rep.tag}_{kind}_{rep.level:g}"
                    (out / f"{stem}.csv").write_text(variance_matrix_csv(rep, report_header(cfg)))
                    (out / f"{stem}.pgm").write_text(variance_heatmap_pgm(rep.variance_matrix))
                    flipped = "" if rep.index_changes is None else f"{(rep.index_changes > 0).mean():.6f}"
                    rows.append([name, rep.tag, kind, f"{rep.level:g}", rep.draws, len(images),
                                 f"{rep.mean_variance:.6e}", flipped])
    write_csv(out / "latent_variance.csv", cfg,
              ["model", "latent", "noise", "level", "draws", "images", "mean_variance", "frac_positions_flipped"],
              rows)


def cmd_codebook_stats(cfg: RunConfig) -> None:
    out = out_dir(cfg)
    corpus = load_split(cfg, cfg["eval.split"], cfg["eval.domain"])
    images, _ = eval_images(cfg, corpus, "eval.n_images")
    rows = []
    for name, ck in checkpoints(cfg):
        if ck.model.codebook is None:
            raise ConfigError(f"checkpoint {name} has no codebook (vq disabled)")
        stats = compute_r(ck.model.codebook)
        counts, ppl = codebook_usage(ck.model, images)
        rows.append([name, ck.model.codebook.K, ck.model.codebook.D, stats.table_entry(),
                     f"{stats.r_mean:.6g}", f"{stats.r_mean_over_k:.6g}", f"{stats.r_std:.6g}",
                     f"{ppl:.6f}", int((counts > 0).sum())])
        per_code = [[k, f"{stats.r_i[k]:.6g}", f"{stats.half_r_i[k]:.6g}", int(counts[k])]
                    for k in range(ck.model.codebook.K)]
        write_csv(out / f"codebook_r_i_{name}.csv", cfg, ["code", "r_i", "half_r_i", "usage"], per_code)
        (out / f"codebook_{name}.csv").write_text(ck.model.codebook.to_csv())
    write_csv(out / "codebook_stats.csv", cfg,
              ["model", "K", "D", "mean_r_pm_std", "r_mean_div_k_minus_1", "r_mean_div_k", "r_std",
               "perplexity", "codes_used"], rows)


def cmd_bound_check(cfg: RunConfig) -> None:
    out = out_dir(cfg)
    corpus = load_split(cfg, cfg["eval.split"], cfg["eval.domain"])
    images, _ = eval_images(cfg, corpus, "bound.n_images")
    kind = cfg["perturb.kinds"][0]
    spec = cfg.perturbation(kind, cfg["bound.level"])
    rows = []
    for name, ck in checkpoints(cfg):
        if ck.model.codebook is None:
            raise ConfigError(f"checkpoint {name} has no codebook (vq disabled)")
        rep = bound_check(model_encoder(ck.model), ck.model.codebook, images, spec, cfg["bound.h"])
        (out / f"bound_check_{name}.csv").write_text(rep.to_csv(report_header(cfg)))
        for regime, c in sorted(rep.summary().items()):
            rows.append([name, str(spec), regime, c["count"], c["changed"]])
    write_csv(out / "bound_summary.csv", cfg, ["model", "perturbation", "regime", "positions", "codes_changed"],
              rows)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "perturb-study": cmd_perturb_study,
    "latent-variance": cmd_latent_variance,
    "codebook-stats": cmd_codebook_stats,
    "bound-check": cmd_bound_check,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vqseg", description="Toy VQ-UNet robustness experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("-c", "--config", help="key=value run configuration file")
    p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, args.overrides)
        HANDLERS[args.command](cfg)
    except VQSegError as exc:
        print(f"vqseg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"vqseg {args.command}: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
