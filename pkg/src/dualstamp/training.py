"""Dataset ingestion, autoencoder pretraining and the joint training loop.

Per joint step: compute the perceptual hash of the cover batch, embed it via
E1 (plane masked to the image center), hash the 8-bit first-stage result via
the frozen autoencoder + SHA3, embed those bits via E2 as an additive
residual, then train the critic one step and all generator networks one
step. Only the copyright branch (D1) sees attacked inputs; the fragile
branch (D2/D3) always receives the clean watermarked batch. Both branches
see the straight-through 8-bit snap that PNG serialization applies anyway.
"""

import json
import warnings
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .attacks import AttackSpec, apply_differentiable, sample_training_attack
from .crypthash import content_hash
from .imagecore import ImageTensor, load_image, resize
from .losses import (LossLog, LossWeights, LpipsModel, bce_bits, critic_losses,
                     gradient_penalty, lpips, residual_recon_loss, residual_reg,
                     total_loss)
from .nets import HyperParams, ModelBundle, from_torch
from .phash import compute_phash


@dataclass
class TrainConfig:
    data_dir: str = ""
    image_size: int = 64
    batch_size: int = 16
    epochs: int = 30
    lr: float = 1.0e-5
    lr_decay: float = 0.2
    plateau_patience: int = 10
    early_stop_patience: int = 20
    kfold: int = 0
    fold: int = 0
    seed: int = 0
    loss_weights: tuple = (1.0, 1.0, 2.0, 2.0, 2.0)
    center_fraction: float = 0.6
    base_channels: int = 32
    unet_depth: int = 4
    latent_dim: int = 64
    levels: int = 16
    r_max: float = 0.2
    sigmoid_gain: float = 2.0
    ae_epochs: int = 12
    ae_lr: float = 1.0e-3
    critic_lr: float = 1.0e-4
    warmup_epochs: int = 2
    threads: int = 0
    lpips_backbone: str = "fixed_random"
    lpips_weights: str = ""
    val_limit: int = 128

    def __post_init__(self):
        if self.image_size < 16 or self.image_size % 16:
            raise ValueError("image_size must be a positive multiple of 16")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if not 0.0 < self.lr_decay < 1.0:
            raise ValueError("lr_decay must lie in (0, 1)")
        self.loss_weights = tuple(float(w) for w in self.loss_weights)

    def hyper(self) -> HyperParams:
        return HyperParams(
            s=self.image_size, unet_depth=self.unet_depth,
            base_channels=self.base_channels, latent_dim=self.latent_dim,
            levels=self.levels, r_max=self.r_max,
            center_fraction=self.center_fraction,
            sigmoid_gain=self.sigmoid_gain, loss_weights=self.loss_weights,
            seed=self.seed,
        )

    def weights(self) -> LossWeights:
        return LossWeights(*self.loss_weights)


@dataclass
class SplitManifest:
    train_files: list
    test_files: list
    seed: int
    fold: int = 0

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=1)

    @classmethod
    def load(cls, path) -> "SplitManifest":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(**raw)


def ingest(data_dir, s, seed, kfold=0, fold=0) -> SplitManifest:
    """Deterministic shuffle and 75/25 split of the decodable images in a
    directory. With kfold > 0 the test set is the fold-th chunk instead."""
    root = Path(data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory {data_dir} does not exist")
    candidates = sorted(
        p for p in root.iterdir()
        if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    files = []
    for p in candidates:
        try:
            with Image.open(p) as im:
                im.verify()
            files.append(str(p))
        except Exception as exc:  # corrupt file: skip, keep going
            warnings.warn(f"skipping unreadable image {p}: {exc}")
    if len(files) < 20:
        raise ValueError(f"need at least 20 decodable images, found {len(files)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(files))
    shuffled = [files[i] for i in order]
    if kfold > 0:
        if not 0 <= fold < kfold:
            raise ValueError("fold index out of range")
        chunk = len(shuffled) // kfold
        start = fold * chunk
        stop = start + chunk if fold < kfold - 1 else len(shuffled)
        test = shuffled[start:stop]
        train = shuffled[:start] + shuffled[stop:]
    else:
        n_train = int(0.75 * len(shuffled))
        train, test = shuffled[:n_train], shuffled[n_train:]
    return SplitManifest(train_files=train, test_files=test, seed=seed, fold=fold)


def load_images_u8(paths, s) -> np.ndarray:
    """Load files, resize to S x S and snap to uint8: (N, S, S, 3)."""
    out = np.empty((len(paths), s, s, 3), dtype=np.uint8)
    for i, p in enumerate(paths):
        img = load_image(p)
        if img.channels == 1:
            img = ImageTensor(np.repeat(img.data, 3, axis=2))
        if (img.height, img.width) != (s, s):
            img = resize(img, s, s)
        out[i] = img.to_uint8()
    return out


def _batch_tensor(u8_block) -> torch.Tensor:
    return torch.from_numpy(u8_block.astype(np.float32).transpose(0, 3, 1, 2) / 255.0)


class PlateauSchedule:
    """Multiplies the learning rate by `decay` after `patience` epochs
    without improvement of the monitored value."""

    def __init__(self, patience, decay):
        self.patience = patience
        self.decay = decay
        self.best = float("inf")
        self.stale = 0

    def update(self, value) -> bool:
        """Returns True when a decay should be applied this epoch."""
        if value < self.best - 1e-9:
            self.best = value
            self.stale = 0
            return False
        self.stale += 1
        if self.stale >= self.patience:
            self.stale = 0
            return True
        return False


def _decay_lr(optimizer, factor):
    for group in optimizer.param_groups:
        group["lr"] *= factor


def pretrain_autoencoder(bundle: ModelBundle, train_u8: np.ndarray,
                         cfg: TrainConfig, test_u8=None):
    """Reconstruction-train the latent autoencoder, then freeze it.

    Freezing switches the latent BatchNorm to its running statistics: the
    fixed affine both hashing parties share from then on.
    """
    ae = bundle.autoencoder
    ae.train()
    opt = torch.optim.Adam(ae.parameters(), lr=cfg.ae_lr)
    rng = np.random.default_rng(cfg.seed + 17)
    history = []
    n = len(train_u8)
    bs = min(cfg.batch_size, n)
    for epoch in range(cfg.ae_epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n - bs + 1, bs):
            batch = _batch_tensor(train_u8[order[start:start + bs]])
            _, recon = ae(batch)
            loss = ((recon - batch) ** 2).mean()
            if not torch.isfinite(loss):
                raise FloatingPointError(
                    f"autoencoder diverged at epoch {epoch}: loss={loss.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss))
        history.append(float(np.mean(losses)))
    ae.eval()
    for p in ae.parameters():
        p.requires_grad_(False)
    heldout = None
    if test_u8 is not None and len(test_u8):
        with torch.no_grad():
            batch = _batch_tensor(test_u8[: min(len(test_u8), 256)])
            _, recon = ae(batch)
            heldout = float(((recon - batch) ** 2).mean())
    return {"history": history, "heldout_mse": heldout}


def _snap8(x: torch.Tensor) -> torch.Tensor:
    """Straight-through 8-bit quantization (the PNG representation)."""
    return x + (torch.round(x * 255.0) / 255.0 - x).detach()


class Trainer:
    """Joint training driver. Exposes counters proving the fragile branch
    never received an attacked image."""

    def __init__(self, manifest: SplitManifest, cfg: TrainConfig, out_dir):
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if cfg.threads > 0:
            torch.set_num_threads(cfg.threads)
        torch.manual_seed(cfg.seed)
        self.bundle = ModelBundle(cfg.hyper())
        self.train_u8 = load_images_u8(manifest.train_files, cfg.image_size)
        self.test_u8 = load_images_u8(manifest.test_files, cfg.image_size)
        self.l_weights = cfg.weights()
        self.lpips_model = LpipsModel(
            backbone=cfg.lpips_backbone, seed=cfg.seed,
            weights_path=cfg.lpips_weights or None)
        self.counters = {"d1_attacked_inputs": 0, "d2_attacked_inputs": 0}
        self.attack_rng = np.random.default_rng(cfg.seed + 101)
        self.torch_gen = torch.Generator().manual_seed(cfg.seed + 202)
        self.gen_opt = torch.optim.Adam(self.bundle.generator_parameters(), lr=cfg.lr)
        self.critic_opt = torch.optim.Adam(self.bundle.critic.parameters(),
                                           lr=cfg.critic_lr)
        self.val_history = []
        self.epoch_losses = []

    # -- forward pipeline shared by train and validation steps ---------------

    def _forward_core(self, imgs, attack_specs):
        """Embedding + decoding forward pass; critic terms are added by the
        caller, after the critic's own update."""
        bundle = self.bundle
        batch_u8 = np.round(imgs.numpy().transpose(0, 2, 3, 1) * 255.0).astype(np.uint8)
        ph_bits = np.stack([
            compute_phash(ImageTensor(a.astype(np.float64) / 255.0)).bits
            for a in batch_u8
        ])
        ph_t = torch.from_numpy(ph_bits.astype(np.float32))
        plane_ph = bundle.fc_ph(ph_t) * bundle.ph_mask
        w1 = _snap8(bundle.e1(imgs, plane_ph))
        h_bits = np.stack([
            content_hash(from_torch(w1[i]), bundle).bits for i in range(len(imgs))
        ])
        h_t = torch.from_numpy(h_bits.astype(np.float32))
        plane_h = bundle.fc_h(h_t)
        r = bundle.e2(w1, plane_h)
        w2 = _snap8(torch.clamp(w1 + r, 0.0, 1.0))

        attacked = []
        for i, spec in enumerate(attack_specs):
            attacked.append(apply_differentiable(spec, w2[i:i + 1], self.torch_gen))
        w2_att = torch.cat(attacked)
        ph_logits = bundle.d1(w2_att)
        r_pred = bundle.d2(w2)
        h_logits = bundle.d3(r_pred)

        return {
            "w1": w1, "r": r, "w2": w2,
            "e1_base": residual_reg(w1 - imgs) + lpips(w1, imgs, self.lpips_model),
            "e2_base": residual_reg(r) + lpips(w2, imgs, self.lpips_model),
            "l_d1": bce_bits(torch.sigmoid(ph_logits), ph_t),
            "l_d2": residual_recon_loss(r, r_pred, self.lpips_model, self.cfg.r_max),
            "l_d3": bce_bits(torch.sigmoid(h_logits), h_t),
        }

    def _components(self, core):
        critic = self.bundle.critic
        l_e1 = core["e1_base"] - critic(core["w1"]).mean()
        l_e2 = core["e2_base"] - critic(core["w2"]).mean()
        return (l_e1, l_e2, core["l_d1"], core["l_d2"], core["l_d3"])

    def _sample_specs(self, n, epoch):
        if epoch < self.cfg.warmup_epochs:
            return [AttackSpec("identity")] * n
        specs = [sample_training_attack(self.attack_rng) for _ in range(n)]
        self.counters["d1_attacked_inputs"] += sum(
            1 for s in specs if s.kind != "identity")
        return specs

    def _train_step(self, batch_u8, epoch):
        imgs = _batch_tensor(batch_u8)
        specs = self._sample_specs(len(imgs), epoch)
        core = self._forward_core(imgs, specs)

        # Critic step first (one per joint step, penalty coefficient 10), so
        # the generator terms below see the updated critic.
        self.critic_opt.zero_grad()
        wm = torch.cat([core["w1"].detach(), core["w2"].detach()])
        cover2 = torch.cat([imgs, imgs])
        gp = gradient_penalty(self.bundle.critic, cover2, wm, self.torch_gen)
        c_obj, _ = critic_losses(self.bundle.critic(imgs),
                                 self.bundle.critic(wm), gp)
        c_obj.backward()
        self.critic_opt.step()

        comps = self._components(core)
        total = total_loss(comps, self.l_weights)
        self.gen_opt.zero_grad()
        self.critic_opt.zero_grad()  # discard generator-pass critic grads
        total.backward()
        self.gen_opt.step()
        return [float(c) for c in comps], float(total)

    def _validation_loss(self):
        n = min(len(self.test_u8), self.cfg.val_limit)
        if n == 0:
            return float("nan")
        bs = min(self.cfg.batch_size, n)
        totals = []
        with torch.no_grad():
            for start in range(0, n - bs + 1, bs):
                imgs = _batch_tensor(self.test_u8[start:start + bs])
                specs = [AttackSpec("identity")] * len(imgs)
                core = self._forward_core(imgs, specs)
                comps = self._components(core)
                totals.append(float(total_loss(comps, self.l_weights)))
        return float(np.mean(totals))

    def run(self):
        cfg = self.cfg
        ae_stats = pretrain_autoencoder(self.bundle, self.train_u8, cfg,
                                        self.test_u8)
        schedule = PlateauSchedule(cfg.plateau_patience, cfg.lr_decay)
        best_val = float("inf")
        stale_epochs = 0
        step = 0
        rng = np.random.default_rng(cfg.seed + 31)
        n = len(self.train_u8)
        bs = min(cfg.batch_size, n)
        best_path = self.out_dir / "checkpoint_best.pt"
        final_path = self.out_dir / "checkpoint.pt"
        with LossLog(self.out_dir / "loss_log.jsonl") as log:
            for epoch in range(cfg.epochs):
                self.bundle.train_mode()
                self.bundle.autoencoder.eval()
                order = rng.permutation(n)
                epoch_totals = []
                for start in range(0, n - bs + 1, bs):
                    comps, total = self._train_step(
                        self.train_u8[order[start:start + bs]], epoch)
                    log.append(step, comps, total)
                    epoch_totals.append(total)
                    step += 1
                self.bundle.eval_mode()
                val = self._validation_loss()
                self.val_history.append(val)
                self.epoch_losses.append(float(np.mean(epoch_totals)))
                if schedule.update(val):
                    _decay_lr(self.gen_opt, cfg.lr_decay)
                    _decay_lr(self.critic_opt, cfg.lr_decay)
                if val < best_val - 1e-9:
                    best_val = val
                    stale_epochs = 0
                    self.bundle.save(best_path)
                else:
                    stale_epochs += 1
                print(f"epoch {epoch}: train {self.epoch_losses[-1]:.4f} "
                      f"val {val:.4f} lr {self.gen_opt.param_groups[0]['lr']:.2e}")
                if stale_epochs >= cfg.early_stop_patience:
                    print(f"early stop after {epoch + 1} epochs")
                    break
        self.bundle.check_finite()
        self.bundle.eval_mode()
        self.bundle.save(final_path)
        meta = {
            "config": asdict(cfg),
            "counters": self.counters,
            "autoencoder": ae_stats,
            "val_history": self.val_history,
            "epoch_losses": self.epoch_losses,
            "best_val": best_val,
        }
        with open(self.out_dir / "meta.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=1)
        return final_path


def train(manifest: SplitManifest, cfg: TrainConfig, out_dir):
    """Run the full joint training; returns the final checkpoint path."""
    trainer = Trainer(manifest, cfg, out_dir)
    return trainer.run()


def evaluate(bundle: ModelBundle, manifest: SplitManifest, attack_list=None,
             seed=0, limit=None) -> dict:
    """Quality metrics plus per-attack copyright and authentication rates
    over the held-out split. The identity row is always included."""
    from . import protocol
    from .attacks import apply, default_evaluation_suite
    from .imagecore import compute_metrics
    from .phash import hamming

    specs = list(attack_list) if attack_list else default_evaluation_suite()
    if not any(s.kind == "identity" for s in specs):
        specs.insert(0, AttackSpec("identity"))
    files = manifest.test_files[:limit] if limit else manifest.test_files
    s = bundle.hyper.s
    quality = []
    phash_kept = 0
    rows = {spec.label(): {
        "spec": spec, "bit_acc": [], "exact": [], "thresh": [], "phase2": []
    } for spec in specs}

    for idx, path in enumerate(files):
        cover = load_image(path)
        if cover.channels == 1:
            cover = ImageTensor(np.repeat(cover.data, 3, axis=2))
        if (cover.height, cover.width) != (s, s):
            cover = resize(cover, s, s)
        cover = cover.quantized()
        emb = protocol.embed_image(cover, bundle)
        quality.append(compute_metrics(cover, emb.w2).as_dict())
        if compute_phash(emb.w2) == emb.ph:
            phash_kept += 1
        for spec in specs:
            row = rows[spec.label()]
            attacked = apply(spec, emb.w2, rng_seed=seed * 100003 + idx).quantized()
            cop = protocol.copyright_check(attacked, bundle)
            extracted = cop["extracted_ph"]
            errs = hamming(protocol.phash_from_hex(extracted), emb.ph)
            row["bit_acc"].append(1.0 - errs / 64.0)
            row["exact"].append(errs == 0)
            row["thresh"].append(errs <= protocol.DEFAULT_HAMMING_THRESHOLD)
            auth = protocol.auth_check(attacked, bundle)
            row["phase2"].append(auth["match"])

    attack_rows = []
    for spec in specs:
        row = rows[spec.label()]
        attack_rows.append({
            "label": spec.label(),
            "kind": spec.kind,
            "params": spec.params,
            "d1_bit_accuracy": float(np.mean(row["bit_acc"])),
            "d1_exact_rate": float(np.mean(row["exact"])),
            "d1_threshold_rate": float(np.mean(row["thresh"])),
            "phase2_pass_rate": float(np.mean(row["phase2"])),
        })
    return {
        "n_images": len(files),
        "seed": seed,
        "checkpoint_id": protocol.checkpoint_fingerprint(bundle),
        "quality": {
            "psnr_mean": float(np.mean([q["psnr"] for q in quality])),
            "ssim_mean": float(np.mean([q["ssim"] for q in quality])),
            "mse_mean": float(np.mean([q["mse"] for q in quality])),
            "per_image": quality,
        },
        "clean_phash_preserved_rate": phash_kept / max(len(files), 1),
        "attacks": attack_rows,
    }
