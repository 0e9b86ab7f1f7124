"""Adversarial training loop.

Two-timescale updates: both critics take Adam steps at lr_d, the generator
and shape controller at lr_g_s, one critic round per generator round by
default. Generator parameters are tracked by an exponential moving average
which is what test-time translation uses. All randomness flows from the
config seed; checkpoints carry optimizer moments and RNG states so a resumed
run reproduces the uninterrupted one bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch

from . import losses
from .data import (
    BACKGROUND,
    FOREGROUND_EPS,
    PhantomDataset,
    encode_image_png,
    sample_training_batch,
)
from .losses import LossReport, LossWeights, NonFiniteLossError
from .networks import (
    ConfigError,
    CriticConfig,
    Discriminator,
    Generator,
    GeneratorConfig,
    ShapeController,
    flatten_module,
    load_param_file,
    meta_from_configs,
    restore_module,
    save_param_file,
)


class TrainingDivergedError(RuntimeError):
    """Raised when a loss goes non-finite; carries the step for diagnosis."""

    def __init__(self, step: int, detail: str):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    lr_g_s: float = 1e-4
    lr_d: float = 3e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    batch_size: int = 4
    epochs: int = 50
    ema_decay: float = 0.999
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    d_steps_per_g_step: int = 1

    def __post_init__(self):
        if self.lr_g_s <= 0 or self.lr_d <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.d_steps_per_g_step < 1:
            raise ConfigError("batch_size/epochs/d_steps_per_g_step out of range")


def ema_update(ema, current, decay: float):
    """decay * ema + (1 - decay) * current, elementwise.

    Accepts tensors or name->tensor mappings; returns the same kind.
    """
    if isinstance(ema, dict):
        return {k: ema_update(v, current[k], decay) for k, v in ema.items()}
    return decay * ema + (1.0 - decay) * current


def binarize_torch(img: torch.Tensor, eps: float = FOREGROUND_EPS) -> torch.Tensor:
    return (img > BACKGROUND + eps).to(img.dtype)


class Trainer:
    """Owns all four networks, their optimizers and the EMA shadow of G.

    Ablation switches: `use_target_stream` gates the target-area stream and
    its critic entirely, `use_crossing` gates the crossing term (requires the
    target stream), `use_shape_controller` gates the shape objective.
    """

    def __init__(
        self,
        gen_cfg: GeneratorConfig,
        critic_cfg: CriticConfig | None = None,
        train_cfg: TrainConfig | None = None,
        use_shape_controller: bool = True,
        use_target_stream: bool = True,
        use_crossing: bool = True,
    ):
        if use_crossing and not use_target_stream:
            raise ConfigError("the crossing loss requires the target-area stream")
        self.gen_cfg = gen_cfg
        self.critic_cfg = critic_cfg or CriticConfig(n_modalities=gen_cfg.n_modalities)
        self.train_cfg = train_cfg or TrainConfig()
        if self.critic_cfg.n_modalities != gen_cfg.n_modalities:
            raise ConfigError("generator and critic disagree on n_modalities")
        self.use_shape_controller = use_shape_controller
        self.use_target_stream = use_target_stream
        self.use_crossing = use_crossing

        torch.manual_seed(self.train_cfg.seed)
        self.generator = Generator(gen_cfg)
        self.shape_controller = ShapeController()
        self.critic_x = Discriminator(self.critic_cfg)
        self.critic_r = Discriminator(self.critic_cfg)

        tc = self.train_cfg
        betas = (tc.adam_beta1, tc.adam_beta2)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=tc.lr_g_s, betas=betas)
        self.opt_s = torch.optim.Adam(self.shape_controller.parameters(), lr=tc.lr_g_s, betas=betas)
        self.opt_dx = torch.optim.Adam(self.critic_x.parameters(), lr=tc.lr_d, betas=betas)
        self.opt_dr = torch.optim.Adam(self.critic_r.parameters(), lr=tc.lr_d, betas=betas)

        self.ema = {k: v.detach().clone() for k, v in self.generator.state_dict().items()}
        self.ema_started = False
        self.step = 0
        self.epoch = 0
        self.np_rng = np.random.default_rng(tc.seed)
        self.torch_rng = torch.Generator().manual_seed(tc.seed + 1)

    # -- batch plumbing ----------------------------------------------------

    def _prepare(self, batch):
        whole = torch.from_numpy(np.stack([b[0] for b in batch])).unsqueeze(1)
        mask = torch.from_numpy(np.stack([b[1] for b in batch]).astype(np.float32)).unsqueeze(1)
        src = torch.tensor([b[2] for b in batch], dtype=torch.long)
        tgt = torch.tensor([b[3] for b in batch], dtype=torch.long)
        area = losses.mask_whole(whole, mask)
        return whole, mask, src, tgt, area

    # -- one critic round --------------------------------------------------

    def train_step_D(self, batch) -> LossReport:
        whole, mask, src, tgt, area = self._prepare(batch)
        w = self.train_cfg.weights
        n = self.gen_cfg.n_modalities
        report = LossReport(step=self.step)

        with torch.no_grad():
            if self.use_target_stream:
                whole_fake, area_fake = self.generator(whole, area, tgt)
            else:
                whole_fake = self.generator.translate(whole, tgt)

        src_real, cls_real = self.critic_x(whole)
        src_fake, cls_fake = self.critic_x(whole_fake)
        adv_x = losses.critic_loss(src_real, src_fake)
        gp_x = losses.gradient_penalty(
            lambda v: self.critic_x(v)[0], whole, whole_fake, self.torch_rng
        )
        cls_r_x = losses.cls_loss_real(cls_real, src, cls_fake, src + n, w.lambda_u)
        total_dx = losses.total_d_loss(adv_x, gp_x, cls_r_x, w)
        self.opt_dx.zero_grad(set_to_none=True)
        total_dx.backward()
        self.opt_dx.step()
        report.adv_x, report.gp_x = adv_x.item(), gp_x.item()
        report.cls_r_x, report.total_Dx = cls_r_x.item(), total_dx.item()

        if self.use_target_stream:
            src_real_r, cls_real_r = self.critic_r(area)
            src_fake_r, cls_fake_r = self.critic_r(area_fake)
            adv_r = losses.critic_loss(src_real_r, src_fake_r)
            gp_r = losses.gradient_penalty(
                lambda v: self.critic_r(v)[0], area, area_fake, self.torch_rng
            )
            cls_r_r = losses.cls_loss_real(cls_real_r, src, cls_fake_r, src + n, w.lambda_u)
            total_dr = losses.total_d_loss(adv_r, gp_r, cls_r_r, w)
            self.opt_dr.zero_grad(set_to_none=True)
            total_dr.backward()
            self.opt_dr.step()
            report.adv_r, report.gp_r = adv_r.item(), gp_r.item()
            report.cls_r_r, report.total_Dr = cls_r_r.item(), total_dr.item()

        report.check_finite()
        return report

    # -- one generator round -----------------------------------------------

    def train_step_G_S(self, batch) -> LossReport:
        whole, mask, src, tgt, area = self._prepare(batch)
        w = self.train_cfg.weights
        report = LossReport(step=self.step)

        if self.use_target_stream:
            whole_fake, area_fake = self.generator(whole, area, tgt)
            whole_rec, area_rec = self.generator(whole_fake, area_fake, src)
        else:
            whole_fake = self.generator.translate(whole, tgt)
            whole_rec = self.generator.translate(whole_fake, src)
            area_fake = area_rec = None

        src_fake_x, cls_fake_x = self.critic_x(whole_fake)
        adv_x = losses.generator_adv_loss(src_fake_x)
        cls_f_x = losses.cls_loss_fake(cls_fake_x, tgt)
        rec_x = losses.reconstruction_loss(whole_rec, whole)
        report.g_adv_x, report.cls_f_x, report.rec_x = adv_x.item(), cls_f_x.item(), rec_x.item()

        adv_r = cls_f_r = rec_r = torch.zeros(())
        cross = torch.zeros(())
        if self.use_target_stream:
            src_fake_r, cls_fake_r = self.critic_r(area_fake)
            adv_r = losses.generator_adv_loss(src_fake_r)
            cls_f_r = losses.cls_loss_fake(cls_fake_r, tgt)
            rec_r = losses.reconstruction_loss(area_rec, area)
            cross = losses.crossing_loss(whole_fake, mask, area_fake)
            report.g_adv_r, report.cls_f_r = adv_r.item(), cls_f_r.item()
            report.rec_r, report.cross = rec_r.item(), cross.item()

        effective_cross = cross if self.use_crossing else torch.zeros(())
        total_g = losses.total_g_loss(
            adv_x, adv_r, cls_f_x, cls_f_r, rec_x, rec_r, effective_cross, w
        )

        total_gs = torch.zeros(())
        if self.use_shape_controller:
            shape_x = losses.shape_consistency_loss(
                self.shape_controller(whole_fake), binarize_torch(whole)
            )
            shape_r = torch.zeros(())
            if self.use_target_stream:
                shape_r = losses.shape_consistency_loss(
                    self.shape_controller(area_fake), binarize_torch(area)
                )
            total_gs = losses.total_gs_loss(shape_x, shape_r)
            report.shape_x, report.shape_r = shape_x.item(), shape_r.item()

        self.opt_g.zero_grad(set_to_none=True)
        self.opt_s.zero_grad(set_to_none=True)
        (total_g + total_gs).backward()
        self.opt_g.step()
        if self.use_shape_controller:
            self.opt_s.step()

        report.total_G, report.total_GS = total_g.item(), total_gs.item()
        report.check_finite()

        with torch.no_grad():
            for k, v in self.generator.state_dict().items():
                self.ema[k].mul_(self.train_cfg.ema_decay).add_(
                    v, alpha=1.0 - self.train_cfg.ema_decay
                )
        self.ema_started = True
        self.step += 1
        report.step = self.step
        return report

    # -- full loop -----------------------------------------------------------

    def train(self, dataset: PhantomDataset, out_dir: Path, log_every: int = 0) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "samples").mkdir(exist_ok=True)
        tc = self.train_cfg
        self.gen_cfg.check_resolution(dataset.resolution)
        for m in dataset.modalities:
            if len(dataset.of_modality(m.id, "train")) < tc.batch_size:
                raise ConfigError(
                    f"modality {m.name} has fewer than batch_size={tc.batch_size} train samples"
                )

        steps_per_epoch = max(1, len(dataset.train_samples) // tc.batch_size)
        csv_path = out_dir / "loss.csv"
        mode = "a" if self.epoch > 0 and csv_path.exists() else "w"
        with open(csv_path, mode) as csv:
            if mode == "w":
                csv.write(losses.CSV_HEADER + "\n")
            for epoch in range(self.epoch + 1, tc.epochs + 1):
                for _ in range(steps_per_epoch):
                    try:
                        for _ in range(tc.d_steps_per_g_step):
                            d_frag = self.train_step_D(
                                sample_training_batch(dataset, tc.batch_size, self.np_rng)
                            )
                        g_frag = self.train_step_G_S(
                            sample_training_batch(dataset, tc.batch_size, self.np_rng)
                        )
                    except NonFiniteLossError as exc:
                        self.save(out_dir / "ckpt_abort.npz")
                        raise TrainingDivergedError(self.step, str(exc)) from exc
                    row = self._merge(d_frag, g_frag)
                    csv.write(row.csv_row() + "\n")
                csv.flush()
                self.epoch = epoch
                self.save(out_dir / f"ckpt_epoch_{epoch:04d}.npz")
                self._write_sample_grid(dataset, out_dir / "samples" / f"epoch_{epoch}.png")
                if log_every and epoch % log_every == 0:
                    print(
                        f"epoch {epoch}/{tc.epochs} step {self.step} "
                        f"cross={row.cross:.4f} rec_x={row.rec_x:.4f} adv_x={row.adv_x:.4f}"
                    )
        final = out_dir / "ckpt_final.npz"
        self.save(final)
        return final

    @staticmethod
    def _merge(d_frag: LossReport, g_frag: LossReport) -> LossReport:
        row = LossReport(**{k: getattr(g_frag, k) for k in g_frag.__dataclass_fields__})
        for k in ("adv_x", "adv_r", "gp_x", "gp_r", "cls_r_x", "cls_r_r", "total_Dx", "total_Dr"):
            setattr(row, k, getattr(d_frag, k))
        return row

    def _write_sample_grid(self, dataset: PhantomDataset, path: Path) -> None:
        gen = self.ema_generator()
        n = self.gen_cfg.n_modalities
        rows = []
        with torch.no_grad():
            for s in range(n):
                pool = dataset.of_modality(s, "test") or dataset.of_modality(s)
                img = torch.from_numpy(pool[0].image).reshape(1, 1, *pool[0].image.shape)
                cells = [
                    gen.translate(img, t).squeeze().numpy() for t in range(n)
                ]
                rows.append(np.concatenate(cells, axis=1))
        encode_image_png(np.concatenate(rows, axis=0), path)

    # -- EMA ------------------------------------------------------------------

    def ema_generator(self) -> Generator:
        gen = Generator(self.gen_cfg)
        gen.load_state_dict({k: v.clone() for k, v in self.ema.items()})
        gen.eval()
        return gen

    # -- checkpointing ---------------------------------------------------------

    def save(self, path: Path) -> None:
        arrays = {}
        arrays.update(flatten_module("G", self.generator))
        arrays.update(flatten_module("S", self.shape_controller))
        arrays.update(flatten_module("Dx", self.critic_x))
        arrays.update(flatten_module("Dr", self.critic_r))
        if self.ema_started:
            arrays.update({f"ema.G.{k}": v.numpy().copy() for k, v in self.ema.items()})
        for name, opt in (
            ("opt.G", self.opt_g), ("opt.S", self.opt_s),
            ("opt.Dx", self.opt_dx), ("opt.Dr", self.opt_dr),
        ):
            for i, st in opt.state_dict()["state"].items():
                step_v = st["step"]
                arrays[f"{name}.{i}.step"] = np.asarray(
                    float(step_v.item() if torch.is_tensor(step_v) else step_v)
                )
                arrays[f"{name}.{i}.exp_avg"] = st["exp_avg"].numpy().copy()
                arrays[f"{name}.{i}.exp_avg_sq"] = st["exp_avg_sq"].numpy().copy()
        arrays["rng.torch"] = self.torch_rng.get_state().numpy().copy()

        meta = meta_from_configs(
            self.gen_cfg,
            self.critic_cfg,
            train=asdict(self.train_cfg),
            step=self.step,
            epoch=self.epoch,
            ema=self.ema_started,
            variant={
                "use_shape_controller": self.use_shape_controller,
                "use_target_stream": self.use_target_stream,
                "use_crossing": self.use_crossing,
            },
            numpy_rng=json.loads(json.dumps(self.np_rng.bit_generator.state)),
        )
        save_param_file(path, meta, arrays)

    @classmethod
    def load(cls, path: Path, n_modalities: int | None = None) -> "Trainer":
        meta, arrays = load_param_file(path)
        if n_modalities is not None and meta["n_modalities"] != n_modalities:
            raise ConfigError(
                f"checkpoint has n_modalities={meta['n_modalities']}, expected {n_modalities}"
            )
        train_meta = dict(meta["train"])
        train_meta["weights"] = LossWeights(**train_meta["weights"])
        trainer = cls(
            GeneratorConfig(**meta["generator"]),
            CriticConfig(**meta["critic"]),
            TrainConfig(**train_meta),
            **meta["variant"],
        )
        restore_module("G", trainer.generator, arrays)
        restore_module("S", trainer.shape_controller, arrays)
        restore_module("Dx", trainer.critic_x, arrays)
        restore_module("Dr", trainer.critic_r, arrays)
        trainer.ema_started = bool(meta["ema"])
        if trainer.ema_started:
            trainer.ema = {
                k: torch.from_numpy(arrays[f"ema.G.{k}"].copy())
                for k in trainer.generator.state_dict()
            }
        for name, opt in (
            ("opt.G", trainer.opt_g), ("opt.S", trainer.opt_s),
            ("opt.Dx", trainer.opt_dx), ("opt.Dr", trainer.opt_dr),
        ):
            idxs = sorted(
                {int(k.split(".")[2]) for k in arrays if k.startswith(name + ".")}
            )
            if not idxs:
                continue
            state = {
                i: {
                    "step": torch.tensor(float(np.asarray(arrays[f"{name}.{i}.step"]).flat[0])),
                    "exp_avg": torch.from_numpy(arrays[f"{name}.{i}.exp_avg"].copy()),
                    "exp_avg_sq": torch.from_numpy(arrays[f"{name}.{i}.exp_avg_sq"].copy()),
                }
                for i in idxs
            }
            sd = opt.state_dict()
            opt.load_state_dict({"state": state, "param_groups": sd["param_groups"]})
        trainer.step = int(meta["step"])
        trainer.epoch = int(meta["epoch"])
        trainer.np_rng = np.random.default_rng()
        trainer.np_rng.bit_generator.state = meta["numpy_rng"]
        trainer.torch_rng.set_state(torch.from_numpy(arrays["rng.torch"].copy()))
        return trainer


def save_checkpoint(trainer: Trainer, path: Path) -> None:
    trainer.save(path)


def load_checkpoint(path: Path, n_modalities: int | None = None) -> Trainer:
    return Trainer.load(path, n_modalities=n_modalities)


def load_generator(path: Path, ema: bool = True) -> Generator:
    """Rebuild just the generator from a checkpoint, EMA weights by default."""
    meta, arrays = load_param_file(path)
    gen = Generator(GeneratorConfig(**meta["generator"]))
    prefix = "ema.G" if ema else "G"
    if ema and not meta.get("ema", False):
        raise ConfigError(f"{path} holds no EMA parameters (saved before any G step)")
    restore_module(prefix, gen, arrays)
    gen.eval()
    return gen
