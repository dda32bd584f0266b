"""Alternating generator/discriminator training with weight averaging.

Each iteration samples one batch, takes one SGD step on the segmentation
loss (plus the weighted adversarial term), optionally absorbs the generator
weights into the SWA average, then takes one Adam step on the discriminator
using the detached prediction and the one-hot ground truth.
"""
from __future__ import annotations

import dataclasses
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import kvfile
from .data import DatasetSpec, Sample, augment, gen_synthetic, load_manifest, one_hot
from .losses import disc_loss, gen_loss
from .metrics import ConfusionMatrix, argmax_labels, miou, report_csv
from .models import NetConfig, Network, build_discriminator, build_generator, forward_discriminator, forward_generator
from .optim import AdamState, SgdState, SwaState, adam_step, poly_lr, sgd_step, swa_update

logger = logging.getLogger(__name__)

ADV_MODES = ("pixelwise", "standard", "off")
SWA_MODES = ("running_mean", "literal_eq7", "off")
RUNLOG_COLUMNS = ("iter", "gen_loss", "mce", "adv", "disc_loss", "lr", "miou", "miou_swa", "seconds")
SWEEP_PARAMS = {"lambda": "lam", "lam": "lam", "n": "swa_n", "swa_n": "swa_n", "th_swa": "th_swa"}
# config-file spellings that differ from field names
KEY_ALIASES = {"lambda": "lam", "n": "swa_n", "m": "batch", "p": "power"}


class TrainConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    n_iter: int = 2000
    batch: int = 8
    lam: float = 0.01
    swa_n: int = 100
    th_swa: float = 0.5
    swa_mode: str = "running_mean"
    adv_mode: str = "pixelwise"
    lr_gen: float = 0.05
    lr_disc: float = 1e-4
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.99
    reduction: str = "mean"
    seed: int = 0
    eval_every: int = 0  # 0 -> n_iter // 20
    # networks
    base_width: int = 16
    depth: int = 2
    disc_width: int = 8
    leaky_slope: float = 0.2
    # data
    num_classes: int = 4
    height: int = 32
    width: int = 32
    num_train: int = 64
    num_eval: int = 64
    min_shapes: int = 1
    max_shapes: int = 3
    noise_std: float = 0.3
    data_seed: int = 0
    border_ignore: bool = False
    scale_lo: float = 1.0
    scale_hi: float = 1.0
    train_manifest: str | None = None
    eval_manifest: str | None = None
    # bookkeeping
    ablation_seeds: tuple[int, ...] = (0, 1, 2)
    log_wall_time: bool = False
    debug_swa: bool = False

    def validate(self) -> "TrainConfig":
        if self.n_iter < 0:
            raise TrainConfigError(f"n_iter must be >= 0, got {self.n_iter}")
        if self.batch <= 0:
            raise TrainConfigError(f"batch must be > 0, got {self.batch}")
        if self.lam < 0:
            raise TrainConfigError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 <= self.th_swa <= 1.0:
            raise TrainConfigError(f"th_swa must lie in [0, 1], got {self.th_swa}")
        if self.swa_n < 1:
            raise TrainConfigError(f"n must be >= 1, got {self.swa_n}")
        if self.swa_mode not in SWA_MODES:
            raise TrainConfigError(f"swa_mode must be one of {SWA_MODES}")
        if self.adv_mode not in ADV_MODES:
            raise TrainConfigError(f"adv_mode must be one of {ADV_MODES}")
        if self.reduction not in ("mean", "sum"):
            raise TrainConfigError("reduction must be 'mean' or 'sum'")
        if not self.scale_hi >= self.scale_lo > 0:
            raise TrainConfigError(f"bad scale range [{self.scale_lo}, {self.scale_hi}]")
        self.gen_net().validate()
        self.disc_net().validate()
        self.dataset_spec(0, 1).validate(self.depth)
        return self

    @property
    def resolved_eval_every(self) -> int:
        return self.eval_every if self.eval_every > 0 else max(1, self.n_iter // 20)

    def gen_net(self) -> NetConfig:
        return NetConfig(3, self.num_classes, self.base_width, self.depth, self.leaky_slope)

    def disc_net(self) -> NetConfig:
        return NetConfig(3, self.num_classes, self.disc_width, self.depth, self.leaky_slope)

    def dataset_spec(self, seed_offset: int, num_samples: int) -> DatasetSpec:
        return DatasetSpec(num_samples=num_samples, height=self.height, width=self.width,
                           num_classes=self.num_classes, min_shapes=self.min_shapes, max_shapes=self.max_shapes,
                           noise_std=self.noise_std, seed=self.data_seed + seed_offset,
                           border_ignore=self.border_ignore)


def load_config(path=None, overrides: Sequence[str] = (), base: TrainConfig | None = None) -> TrainConfig:
    values: dict[str, str] = {}
    if path is not None:
        values.update(kvfile.read(path))
    values.update(kvfile.parse_overrides(overrides))
    values = {KEY_ALIASES.get(k, k): v for k, v in values.items()}
    cfg = kvfile.apply(TrainConfig, values, base)
    return cfg.validate()


def dump_config(cfg: TrainConfig) -> str:
    return kvfile.dump(cfg)


# ---------------------------------------------------------------------------


@dataclass
class RunLog:
    records: list[dict] = field(default_factory=list)

    def append(self, rec: dict) -> None:
        if self.records and rec["iter"] <= self.records[-1]["iter"]:
            raise ValueError("run log iterations must increase strictly")
        self.records.append(rec)

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(RUNLOG_COLUMNS) + "\n")
        for r in self.records:
            buf.write(",".join(_fmt(r[c]) for c in RUNLOG_COLUMNS) + "\n")
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if np.isnan(v) else repr(v)


@dataclass
class TrainResult:
    gen: Network
    swa: Network | None
    disc: Network | None
    log: RunLog
    config: TrainConfig
    sgd: SgdState
    adam: AdamState | None
    swa_state: SwaState | None

    def score(self, which: str = "final") -> float:
        """Final (or best) eval mIoU of the test-time weights: theta_swa when SWA is on."""
        col = "miou_swa" if self.swa is not None else "miou"
        vals = self.log.column(col)
        return float(vals[-1] if which == "final" else max(vals))


def load_datasets(cfg: TrainConfig) -> tuple[list[Sample], list[Sample]]:
    if cfg.train_manifest:
        train = load_manifest(cfg.train_manifest, cfg.num_classes)
    else:
        train = gen_synthetic(cfg.dataset_spec(0, cfg.num_train))
    if cfg.eval_manifest:
        held = load_manifest(cfg.eval_manifest, cfg.num_classes)
    else:
        held = gen_synthetic(cfg.dataset_spec(10_000, cfg.num_eval))
    if not train or not held:
        raise TrainConfigError("training and evaluation sets must be non-empty")
    return train, held


def predict(net: Network, images: np.ndarray, chunk: int = 32) -> np.ndarray:
    """Argmax label maps for a stack of images (no tape)."""
    outs = [argmax_labels(forward_generator(net, images[i : i + chunk]).data) for i in range(0, len(images), chunk)]
    return np.concatenate(outs)


def confusion(net: Network, samples: Sequence[Sample]) -> ConfusionMatrix:
    cm = ConfusionMatrix(net.cfg.num_classes)
    images = np.stack([s.image for s in samples])
    for pred, s in zip(predict(net, images), samples):
        cm.accumulate(pred, s.labels)
    return cm


def dataset_miou(net: Network, samples: Sequence[Sample]) -> float:
    return miou(confusion(net, samples))


def swa_network(gen: Network, state: SwaState) -> Network:
    net = gen.copy()
    net.load_state_dict({k: v.astype(np.float32) for k, v in state.theta_swa.items()})
    return net


def _batch(samples: Sequence[Sample], rng: np.random.Generator, cfg: TrainConfig, it: int):
    idx = rng.integers(0, len(samples), size=cfg.batch)
    if cfg.scale_lo == cfg.scale_hi == 1.0:
        chosen = [samples[j] for j in idx]
    else:
        chosen = [augment(samples[j], (cfg.scale_lo, cfg.scale_hi), cfg.height, cfg.width, (cfg.seed, it, b))
                  for b, j in enumerate(idx)]
    x = np.stack([s.image for s in chosen])
    y = np.stack([s.labels.classes for s in chosen])
    return x, y


def _set_trainable(net: Network, flag: bool) -> None:
    for p in net.params.values():
        p.requires_grad = flag
        p.grad = None


def train(cfg: TrainConfig, out_dir=None, datasets=None) -> TrainResult:
    """Run the alternating training loop; writes run log and checkpoints when ``out_dir`` is given."""
    cfg.validate()
    train_set, eval_set = datasets if datasets is not None else load_datasets(cfg)
    # independent streams: toggling the discriminator never perturbs the generator's randomness
    gen_seed, disc_seed, batch_seed = np.random.SeedSequence(cfg.seed).spawn(3)
    gen = build_generator(cfg.gen_net(), int(gen_seed.generate_state(1)[0]))
    adv_on = cfg.adv_mode != "off"
    disc = build_discriminator(cfg.disc_net(), int(disc_seed.generate_state(1)[0]), head=cfg.adv_mode) if adv_on else None
    rng = np.random.default_rng(batch_seed)
    sgd = SgdState(cfg.momentum, cfg.weight_decay)
    adam = AdamState(cfg.beta1, cfg.beta2) if adv_on else None
    swa = SwaState.from_params(gen.state_dict(), cfg.swa_n, cfg.swa_mode) if cfg.swa_mode != "off" else None
    swa_start = cfg.th_swa * cfg.n_iter
    snap_sum = {k: np.zeros(v.shape) for k, v in gen.state_dict().items()} if cfg.debug_swa and swa else None

    log = RunLog()
    every = cfg.resolved_eval_every
    t0 = time.perf_counter()
    gen_params = list(gen.params.values())
    disc_params = list(disc.params.values()) if disc else []
    last = {"gen_loss": np.nan, "mce": np.nan, "adv": np.nan, "disc_loss": np.nan, "lr": np.nan}

    for i in range(cfg.n_iter):
        x, y = _batch(train_set, rng, cfg, i)
        lr_g = poly_lr(cfg.lr_gen, i, cfg.n_iter, cfg.power)
        lr_d = poly_lr(cfg.lr_disc, i, cfg.n_iter, cfg.power)

        # generator step, discriminator frozen
        _set_trainable(gen, True)
        if disc:
            _set_trainable(disc, False)
        with ag.Tape() as tape:
            probs = forward_generator(gen, x)
            conf = forward_discriminator(disc, probs) if disc else None
            total, mce, adv = gen_loss(probs, y, conf, cfg.lam, cfg.reduction)
        _check_finite(i, total=total.item(), mce=mce.item(), adv=adv.item() if adv is not None else 0.0)
        ag.backward(total, tape)
        sgd_step(gen_params, sgd, lr_g)
        # the log floor masks NaN probabilities, so the weights are checked too
        _check_params(i, gen)

        if swa is not None and i >= swa_start and i % cfg.swa_n == 0:
            snapshot = gen.state_dict()
            swa_update(swa, snapshot)
            if snap_sum is not None:
                _check_swa_mean(swa, snap_sum, snapshot)

        # discriminator step on the detached prediction, generator frozen
        d_val = np.nan
        if disc:
            _set_trainable(gen, False)
            _set_trainable(disc, True)
            with ag.Tape() as tape:
                c_fake = forward_discriminator(disc, probs.detach())
                c_real = forward_discriminator(disc, one_hot(y, cfg.num_classes))
                dl = disc_loss(c_fake, c_real, cfg.reduction)
            d_val = dl.item()
            _check_finite(i, disc_loss=d_val)
            ag.backward(dl, tape)
            adam_step(disc_params, adam, lr_d)
            _check_params(i, disc)

        last = {"gen_loss": total.item(), "mce": mce.item(), "adv": adv.item() if adv is not None else np.nan,
                "disc_loss": d_val, "lr": lr_g}
        if (i + 1) % every == 0 or i + 1 == cfg.n_iter:
            log.append(_eval_record(i + 1, last, gen, swa, eval_set, t0, cfg))

    if cfg.n_iter == 0:
        log.append(_eval_record(0, last, gen, swa, eval_set, t0, cfg))
    _set_trainable(gen, True)
    if disc:
        _set_trainable(disc, True)
    swa_net = swa_network(gen, swa) if swa is not None else None
    result = TrainResult(gen, swa_net, disc, log, cfg, sgd, adam, swa)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def _eval_record(it, last, gen, swa, eval_set, t0, cfg) -> dict:
    rec = {"iter": it, **last, "miou": dataset_miou(gen, eval_set)}
    rec["miou_swa"] = dataset_miou(swa_network(gen, swa), eval_set) if swa is not None else np.nan
    elapsed = time.perf_counter() - t0
    rec["seconds"] = elapsed if cfg.log_wall_time else None
    logger.info("iter %d gen %.4f disc %.4f miou %.4f swa %.4f (%.1fs)", it, rec["gen_loss"], rec["disc_loss"],
                rec["miou"], rec["miou_swa"], elapsed)
    return rec


def _check_finite(it: int, **values: float) -> None:
    bad = {k: v for k, v in values.items() if not np.isfinite(v)}
    if bad:
        raise DivergenceError(f"non-finite loss at iteration {it}: {values}")


def _check_params(it: int, net: Network) -> None:
    for name, p in net.params.items():
        if not np.isfinite(p.data.sum()):
            raise DivergenceError(f"non-finite {net.role} weights in {name} after iteration {it}")


def _check_swa_mean(swa: SwaState, snap_sum: dict, snapshot: dict) -> None:
    for k, v in snapshot.items():
        snap_sum[k] += v
    if swa.mode != "running_mean":
        return
    for k, total in snap_sum.items():
        expect = total / swa.update_count
        if not np.allclose(swa.theta_swa[k], expect, rtol=1e-9, atol=1e-12):
            raise AssertionError(f"theta_swa[{k}] drifted from the snapshot mean")


def _opt_tensors(result: TrainResult) -> tuple[dict, dict, dict]:
    names = list(result.gen.params)
    gen_extra = {f"opt.sgd.buf.{k}": b for k, b in zip(names, result.sgd.momentum_buffers)}
    disc_extra = {}
    if result.adam is not None and result.disc is not None:
        dnames = list(result.disc.params)
        disc_extra.update({f"opt.adam.m.{k}": m for k, m in zip(dnames, result.adam.m)})
        disc_extra.update({f"opt.adam.v.{k}": v for k, v in zip(dnames, result.adam.v)})
        disc_extra["opt.adam.step"] = np.array([result.adam.step_count], dtype=np.float32)
    swa_extra = {}
    if result.swa_state is not None:
        swa_extra["opt.swa.count"] = np.array([result.swa_state.update_count], dtype=np.float32)
    return gen_extra, disc_extra, swa_extra


def write_outputs(result: TrainResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    it = result.config.n_iter
    (out / "config.txt").write_text(dump_config(result.config))
    (out / "runlog.csv").write_text(result.log.to_csv())
    gen_extra, disc_extra, swa_extra = _opt_tensors(result)
    result.gen.save(out / f"gen_{it}.ckpt", gen_extra)
    if result.swa is not None:
        result.swa.save(out / f"swa_{it}.ckpt", swa_extra)
    if result.disc is not None:
        result.disc.save(out / f"disc_{it}.ckpt", disc_extra)
    return out


# ---------------------------------------------------------------------------
# evaluation, sweeps, ablation


def resolve_checkpoint(path, use_swa: bool) -> Path:
    """With ``use_swa`` a ``gen_<iter>.ckpt`` path is redirected to its ``swa_<iter>.ckpt`` sibling."""
    p = Path(path)
    if use_swa and p.name.startswith("gen_"):
        p = p.with_name("swa_" + p.name[len("gen_"):])
    if not p.exists():
        raise FileNotFoundError(p)
    return p


def evaluate(checkpoint, dataset, use_swa: bool = False) -> tuple[ConfusionMatrix, str]:
    """Score a generator (network or checkpoint path) on samples or a manifest path."""
    net = checkpoint if isinstance(checkpoint, Network) else Network.load(resolve_checkpoint(checkpoint, use_swa))
    if net.role != "generator":
        raise TrainConfigError("evaluation needs a generator checkpoint")
    samples = load_manifest(dataset, net.cfg.num_classes) if isinstance(dataset, (str, Path)) else list(dataset)
    if not samples:
        raise TrainConfigError("empty evaluation dataset")
    cm = confusion(net, samples)
    return cm, report_csv(cm)


def sweep(base: TrainConfig, param: str, values: Sequence[float], out_dir=None, datasets=None) -> str:
    """One train run per value with a common seed; CSV ``value,best_miou,final_miou``."""
    if param not in SWEEP_PARAMS:
        raise TrainConfigError(f"cannot sweep {param!r}; choose from lambda, n, th_swa")
    if not values:
        raise TrainConfigError("sweep needs at least one value")
    fname = SWEEP_PARAMS[param]
    ftype = int if fname == "swa_n" else float
    datasets = datasets if datasets is not None else load_datasets(base)
    lines = ["value,best_miou,final_miou\n"]
    for v in values:
        cfg = dataclasses.replace(base, **{fname: ftype(v)})
        sub = Path(out_dir) / f"{param}_{v}" if out_dir is not None else None
        res = train(cfg, sub, datasets)
        lines.append(f"{v},{res.score('best'):.6f},{res.score('final'):.6f}\n")
    text = "".join(lines)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "sweep.csv").write_text(text)
    return text


ABLATION_ADV = ("baseline", "standard", "pixelwise")


def ablation(base: TrainConfig, out_dir=None, datasets=None, seeds: Sequence[int] | None = None) -> str:
    """{baseline, standard, pixelwise} x {swa off, on} over several seeds.

    SWA never feeds back into training, so one run per (adversarial mode, seed)
    yields both the plain and the averaged score.
    """
    seeds = tuple(seeds if seeds is not None else base.ablation_seeds)
    swa_mode = base.swa_mode if base.swa_mode != "off" else "running_mean"
    datasets = datasets if datasets is not None else load_datasets(base)
    scores: dict[tuple[str, bool], list[float]] = {}
    for name in ABLATION_ADV:
        adv = "off" if name == "baseline" else name
        for s in seeds:
            cfg = dataclasses.replace(base, adv_mode=adv, swa_mode=swa_mode, seed=s)
            sub = Path(out_dir) / f"{name}_seed{s}" if out_dir is not None else None
            res = train(cfg, sub, datasets)
            scores.setdefault((name, False), []).append(res.log.column("miou")[-1])
            scores.setdefault((name, True), []).append(res.log.column("miou_swa")[-1])
    lines = ["condition,adv_mode,swa,mean_miou,std_miou,min_miou,max_miou,per_seed\n"]
    for name in ABLATION_ADV:
        for use_swa in (False, True):
            v = np.array(scores[(name, use_swa)])
            label = f"{name}+swa" if use_swa else name
            per = ";".join(f"{x:.6f}" for x in v)
            lines.append(f"{label},{'off' if name == 'baseline' else name},{'on' if use_swa else 'off'},"
                         f"{v.mean():.6f},{v.std():.6f},{v.min():.6f},{v.max():.6f},{per}\n")
    text = "".join(lines)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.csv").write_text(text)
    return text
