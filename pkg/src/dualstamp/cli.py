"""Command-line front end: train, embed, verify, attack, evaluate, adversary,
phash, hash, plus fixture generation for desk-scale corpora.

Exit codes: 0 success, 1 verification negative (verify only), 2 usage or
config error, 3 runtime failure. Run configs are flat key=value text files
whose keys mirror TrainConfig; unknown keys are rejected and the effective
config is echoed into every output directory.
"""

import csv
import dataclasses
import datetime
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import adversary as adversary_mod
from . import corpus as corpus_mod
from . import protocol, training
from .attacks import KINDS as ATTACK_KINDS
from .attacks import AttackSpec
from .crypthash import content_hash
from .imagecore import ImageTensor, load_image, resize, save_png
from .losses import read_loss_log
from .nets import ModelBundle
from .phash import compute_phash

_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(training.TrainConfig)}


def _parse_value(key, text):
    f = _TRAIN_FIELDS[key]
    text = text.strip()
    if f.type in ("int", int):
        return int(text)
    if f.type in ("float", float):
        return float(text)
    if key == "loss_weights":
        return tuple(float(v) for v in text.split(","))
    return text


def load_run_config(path=None, overrides=()):
    """Flat key=value config -> TrainConfig; unknown keys rejected."""
    values = {}
    if path:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise click.UsageError(f"{path}:{lineno}: expected key=value")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in _TRAIN_FIELDS:
                raise click.UsageError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_value(key, val)
    for item in overrides:
        key, _, val = item.partition("=")
        key = key.strip()
        if key not in _TRAIN_FIELDS:
            raise click.UsageError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, val)
    try:
        return training.TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise click.UsageError(f"invalid config: {exc}")


def echo_config(cfg: training.TrainConfig, out_dir):
    lines = []
    for key in _TRAIN_FIELDS:
        value = getattr(cfg, key)
        if key == "loss_weights":
            value = ",".join(f"{v:g}" for v in value)
        lines.append(f"{key} = {value}")
    Path(out_dir, "config.effective").write_text("\n".join(lines) + "\n")


def _fresh_out_dir(out, prefix):
    if out:
        path = Path(out)
    else:
        stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
        path = Path("runs") / f"{prefix}-{stamp}"
    path.mkdir(parents=True, exist_ok=True)
    return path


@click.group()
def cli():
    """Dual invisible watermarking: perceptual-hash copyright mark plus
    latent-quantized cryptographic authentication mark."""


@cli.command("phash")
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
def phash_cmd(file):
    """Print the 64-bit DCT perceptual hash of FILE as 16 hex digits."""
    click.echo(compute_phash(load_image(file)).to_hex())


@cli.command("hash")
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
def hash_cmd(file, checkpoint):
    """Print the 256-bit content hash of FILE (resized to pipeline scale)."""
    bundle = ModelBundle.load(checkpoint)
    img = load_image(file)
    if img.channels == 1:
        img = ImageTensor(np.repeat(img.data, 3, axis=2))
    s = bundle.hyper.s
    if (img.height, img.width) != (s, s):
        img = resize(img, s, s)
    click.echo(content_hash(img.quantized(), bundle).to_hex())


@cli.command("embed")
@click.argument("input_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--out", "-o", required=True, type=click.Path())
@click.option("--record", type=click.Path(), default=None,
              help="Optional JSON side record (informational only).")
def embed_cmd(input_file, checkpoint, out, record):
    """Embed both watermarks into INPUT_FILE; write lossless PNG to --out."""
    bundle = ModelBundle.load(checkpoint)
    png_bytes, side = protocol.embed(load_image(input_file), bundle)
    Path(out).write_bytes(png_bytes)
    if record:
        Path(record).write_text(json.dumps(side, indent=1))
    click.echo(f"embedded ph={side['ph']} h={side['h']} -> {out}")


@cli.command("verify")
@click.argument("input_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(["copyright", "auth", "both"]),
              default="both")
@click.option("--threshold", type=int, default=protocol.DEFAULT_HAMMING_THRESHOLD,
              help="Hamming threshold for the copyright decision.")
@click.option("--report", type=click.Path(), default=None)
@click.option("--original", type=click.Path(exists=True), default=None,
              help="Optional original image for quality metrics.")
def verify_cmd(input_file, checkpoint, mode, threshold, report, original):
    """Run the requested extraction phases; exit 1 if verification fails."""
    bundle = ModelBundle.load(checkpoint)
    orig = load_image(original) if original else None
    rep = protocol.verify(input_file, bundle, mode=mode,
                          hamming_threshold=threshold, original=orig)
    text = rep.to_json()
    if report:
        Path(report).write_text(text)
    click.echo(text)
    return 0 if rep.passed(mode) else 1


_ATTACK_PARAM_OPTS = {
    "q": int, "window": int, "density": float, "sigma": float, "peak": float,
    "size": int, "target": int, "axis": str, "degrees": float, "delta": float,
    "factor": float,
}


@cli.command("attack")
@click.argument("input_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--kind", required=True, type=click.Choice(list(ATTACK_KINDS)))
@click.option("--q", type=int, default=None)
@click.option("--window", type=int, default=None)
@click.option("--density", type=float, default=None)
@click.option("--sigma", type=float, default=None)
@click.option("--peak", type=float, default=None)
@click.option("--size", type=int, default=None)
@click.option("--target", type=int, default=None)
@click.option("--axis", type=click.Choice(["h", "v"]), default=None)
@click.option("--degrees", type=float, default=None)
@click.option("--delta", type=float, default=None)
@click.option("--factor", type=float, default=None)
@click.option("--seed", type=int, default=0)
@click.option("--out", "-o", required=True, type=click.Path())
def attack_cmd(input_file, kind, seed, out, **params):
    """Apply a content-preserving manipulation and write the result as PNG."""
    from .attacks import apply

    given = {k: v for k, v in params.items() if v is not None}
    try:
        spec = AttackSpec(kind, given)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    result = apply(spec, load_image(input_file), rng_seed=seed)
    save_png(result, out)
    click.echo(f"{spec.label()} -> {out}")


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
              default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--set", "overrides", multiple=True,
              help="Override a config key, e.g. --set epochs=5")
def train_cmd(config_path, data_dir, out, overrides):
    """Pretrain the autoencoder and run the joint training loop."""
    cfg = load_run_config(config_path, overrides)
    if data_dir:
        cfg = dataclasses.replace(cfg, data_dir=data_dir)
    if not cfg.data_dir:
        raise click.UsageError("no data directory (config data_dir or --data)")
    out_dir = _fresh_out_dir(out, "train")
    echo_config(cfg, out_dir)
    manifest = training.ingest(cfg.data_dir, cfg.image_size, cfg.seed,
                               kfold=cfg.kfold, fold=cfg.fold)
    manifest.save(out_dir / "manifest.json")
    ckpt = training.train(manifest, cfg, out_dir)
    click.echo(f"checkpoint: {ckpt}")


@cli.command("evaluate")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
              default=None)
@click.option("--manifest", "manifest_path", type=click.Path(exists=True),
              default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--seed", type=int, default=0)
@click.option("--limit", type=int, default=0)
def evaluate_cmd(checkpoint, data_dir, manifest_path, out, seed, limit):
    """Quality metrics and per-attack accuracy tables on the held-out split."""
    if not (data_dir or manifest_path):
        raise click.UsageError("need --data or --manifest")
    bundle = ModelBundle.load(checkpoint)
    if manifest_path:
        manifest = training.SplitManifest.load(manifest_path)
    else:
        manifest = training.ingest(data_dir, bundle.hyper.s, seed)
    out_dir = _fresh_out_dir(out, "evaluate")
    report = training.evaluate(bundle, manifest, seed=seed, limit=limit or None)
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1)
    emit_plot_data(out_dir)
    click.echo(f"report: {out_dir / 'report.json'}")
    click.echo(f"psnr={report['quality']['psnr_mean']:.2f} "
               f"ssim={report['quality']['ssim_mean']:.4f}")


@cli.command("adversary")
@click.argument("mode", type=click.Choice(["overwrite", "surrogate"]))
@click.option("--target", required=True, type=click.Path(exists=True))
@click.option("--corpus", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", type=click.Path(), default=None)
@click.option("--epochs", type=int, default=10)
@click.option("--variant", type=click.Choice(list(adversary_mod._VARIANT_DEPTHS)),
              default="unet3")
@click.option("--seed", type=int, default=0)
@click.option("--limit", type=int, default=0)
def adversary_cmd(mode, target, corpus, out, epochs, variant, seed, limit):
    """Run an attack harness against a trained checkpoint (read-only)."""
    cfg = adversary_mod.AdversaryConfig(variant=variant, epochs=epochs,
                                        seed=seed, limit=limit)
    out_dir = _fresh_out_dir(out, f"adversary-{mode}")
    if mode == "overwrite":
        report = adversary_mod.overwrite_attack(target, corpus, cfg)
    else:
        report = adversary_mod.surrogate_attack(target, corpus, cfg)
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1)
    click.echo(json.dumps(report, indent=1))


@cli.command("fixtures")
@click.argument("out_dir", type=click.Path())
@click.option("--count", type=int, default=200)
@click.option("--size", type=int, default=64)
@click.option("--seed", type=int, default=0)
def fixtures_cmd(out_dir, count, size, seed):
    """Generate a synthetic natural-like image corpus for desk-scale runs."""
    paths = corpus_mod.generate_corpus(out_dir, count, size=size, seed=seed)
    click.echo(f"wrote {len(paths)} images to {out_dir}")


_JPEG_ORDER = {10: 0, 30: 1, 50: 2}


def _attack_sort_key(row):
    order = ("jpeg", "gaussian_blur", "salt_pepper", "gaussian_noise",
             "poisson_noise", "random_crop", "edge_crop", "flip", "rotate",
             "brightness", "contrast", "identity")
    kind_rank = order.index(row["kind"]) if row["kind"] in order else 99
    param = 0.0
    for v in row["params"].values():
        if isinstance(v, (int, float)):
            param = float(v)
    return (0 if row["kind"] == "identity" else 1, kind_rank, param)


def emit_plot_data(run_dir):
    """Write the CSV tables for a completed train or evaluate run."""
    run = Path(run_dir)
    wrote = []
    log_path = run / "loss_log.jsonl"
    if log_path.exists():
        records = read_loss_log(log_path)
        with open(run / "loss_curves.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["step", "l_e1", "l_e2",
                                                    "l_d1", "l_d2", "l_d3", "total"])
            writer.writeheader()
            writer.writerows(records)
        wrote.append("loss_curves.csv")
    report_path = run / "report.json"
    if report_path.exists():
        with open(report_path, encoding="utf-8") as fh:
            report = json.load(fh)
        with open(run / "quality_metrics.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["index", "psnr", "ssim", "mse"])
            writer.writeheader()
            for i, q in enumerate(report["quality"]["per_image"]):
                writer.writerow({"index": i, **q})
        rows = sorted(report["attacks"], key=_attack_sort_key)
        with open(run / "d1_accuracy_per_attack.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=[
                "label", "kind", "d1_bit_accuracy", "d1_exact_rate",
                "d1_threshold_rate"])
            writer.writeheader()
            for row in rows:
                writer.writerow({k: row[k] for k in writer.fieldnames})
        with open(run / "phase2_per_attack.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["label", "kind",
                                                    "phase2_pass_rate"])
            writer.writeheader()
            for row in rows:
                writer.writerow({k: row[k] for k in writer.fieldnames})
        wrote.extend(["quality_metrics.csv", "d1_accuracy_per_attack.csv",
                      "phase2_per_attack.csv"])
    if not wrote:
        raise FileNotFoundError(f"no run artifacts found in {run_dir}")
    return wrote


def main(argv=None):
    """Entry point implementing the exit-code contract."""
    try:
        rv = cli.main(args=argv, standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        sys.exit(2)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except click.exceptions.Abort:
        sys.exit(2)
    except Exception as exc:  # runtime failure
        click.echo(f"error: {exc}", err=True)
        sys.exit(3)
    sys.exit(int(rv) if isinstance(rv, int) else 0)


if __name__ == "__main__":
    main()
