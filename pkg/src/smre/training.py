"""Optimization recipe: combined pixel/frequency loss, bias-corrected
Adam, halving milestone schedule, and aligned patch sampling with
dihedral augmentation."""

import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, OptimizerError, ShapeError
from .imaging import bicubic_resize, load_png

MILESTONE_FRACTIONS = (0.5, 0.8, 0.9, 0.95)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def desk_milestones(iters):
    """Scale the canonical milestone fractions onto a run of any length.

    Very short runs can collapse neighboring fractions onto the same
    iteration; duplicates are dropped so the result stays a valid
    strictly increasing schedule.
    """
    marks = sorted({int(f * iters) for f in MILESTONE_FRACTIONS})
    return tuple(m for m in marks if m < iters)


@dataclass
class TrainConfig:
    patch: int = 48          # LR crop side; HR side is patch * scale
    batch: int = 8
    iters: int = 1000
    lr0: float = 1e-3
    milestones: tuple = None
    fft_weight: float = 0.1
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.milestones is None:
            self.milestones = desk_milestones(self.iters)
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.patch < 1 or self.batch < 1 or self.iters < 1:
            raise ConfigError("patch, batch, and iters must be positive")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive, got %r" % self.lr0)
        if self.fft_weight < 0:
            raise ConfigError("fft_weight must be >= 0, got %r" % self.fft_weight)
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError("milestones must be strictly increasing: %s"
                              % (self.milestones,))
        if self.milestones and self.milestones[-1] >= self.iters:
            raise ConfigError("milestones must stay below iters=%d: %s"
                              % (self.iters, self.milestones))


# ---------------------------------------------------------------------------
# loss


def combined_loss_parts(sr, hr, fft_weight):
    """Total loss plus its (pixel, frequency) components as floats.

    The frequency term is the L1 distance between the full 2-D DFTs,
    taken as mean |difference| over the real bins plus the same over the
    imaginary bins. DFT linearity lets it run on a single transform of
    the residual.
    """
    if sr.shape != hr.shape:
        raise ShapeError("loss inputs differ in shape: %s vs %s"
                         % (tuple(sr.shape), tuple(hr.shape)))
    diff = ad.sub(sr, hr)
    pixel = ad.mean_(ad.abs_(diff))
    spectrum = ad.fft2d(diff)
    freq = ad.add(ad.mean_(ad.abs_(spectrum.real)), ad.mean_(ad.abs_(spectrum.imag)))
    total = ad.add(pixel, ad.scale(freq, float(fft_weight)))
    return total, float(pixel.data), float(freq.data)


def combined_loss(sr, hr, fft_weight):
    return combined_loss_parts(sr, hr, fft_weight)[0]


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params):
        self.m = [np.zeros_like(np.asarray(p.data, dtype=np.float64)) for p in params]
        self.v = [np.zeros_like(np.asarray(p.data, dtype=np.float64)) for p in params]
        self.step = 0


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, applied to params in place.

    Any non-finite gradient aborts before touching parameters or state,
    so a failed step leaves everything untouched.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise OptimizerError("parameter/gradient/state lengths disagree")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise OptimizerError("non-finite gradient for parameter %d of %d"
                                 % (i, len(grads)))
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        p.data = (p.data - update).astype(p.data.dtype)


def lr_at(iteration, cfg):
    """Schedule value: lr0 halved once per milestone already reached."""
    if iteration < 0 or iteration >= cfg.iters:
        raise ConfigError("iteration %d outside [0, %d)" % (iteration, cfg.iters))
    halvings = sum(1 for m in cfg.milestones if m <= iteration)
    return cfg.lr0 * 0.5 ** halvings


# ---------------------------------------------------------------------------
# data


class PairedDataset:
    """Aligned LR/HR float pairs, channel-first in [0,1].

    pairs is a list of (lr, hr) float64 arrays shaped (3,h,w) and
    (3, h*scale, w*scale).
    """

    def __init__(self, pairs, scale):
        if not pairs:
            raise DataError("dataset holds no usable image pairs")
        self.scale = int(scale)
        for lr, hr in pairs:
            if hr.shape[1] != lr.shape[1] * self.scale or \
               hr.shape[2] != lr.shape[2] * self.scale:
                raise DataError("pair %s / %s is not aligned at scale %d"
                                % (lr.shape, hr.shape, self.scale))
        self.pairs = list(pairs)

    def __len__(self):
        return len(self.pairs)

    @classmethod
    def from_dir(cls, hr_dir, scale, min_lr_side=1):
        """Scan a directory of HR PNGs.

        LR siblings are read from '<hr_dir>_lrx<scale>' when that
        directory exists (matched by filename), otherwise derived on the
        fly by bicubic downscaling. Images too small to crop are skipped
        with a warning.
        """
        from pathlib import Path
        hr_dir = Path(hr_dir)
        if not hr_dir.is_dir():
            raise DataError("HR directory %s does not exist" % hr_dir)
        lr_dir = hr_dir.parent / (hr_dir.name + "_lrx%d" % scale)
        pairs = []
        for hr_path in sorted(hr_dir.glob("*.png")):
            hr = load_png(hr_path)
            if hr.height % scale or hr.width % scale:
                # trim to a multiple of scale so LR/HR stay aligned
                hr_arr = hr.pixels[:hr.height - hr.height % scale,
                                   :hr.width - hr.width % scale]
                from .imaging import ImagePlane
                hr = ImagePlane(hr_arr.copy())
            if hr.height // scale < min_lr_side or hr.width // scale < min_lr_side:
                warnings.warn("skipping %s: %dx%d too small for LR side %d"
                              % (hr_path.name, hr.height, hr.width, min_lr_side))
                continue
            lr_path = lr_dir / hr_path.name
            if lr_path.is_file():
                lr = load_png(lr_path)
                if (lr.height, lr.width) != (hr.height // scale, hr.width // scale):
                    raise DataError("LR file %s is %dx%d, expected %dx%d"
                                    % (lr_path, lr.height, lr.width,
                                       hr.height // scale, hr.width // scale))
            else:
                lr = bicubic_resize(hr, 1, scale)
            pairs.append((lr.to_unit_floats(), hr.to_unit_floats()))
        return cls(pairs, scale)


def _dihedral(arr, rot, flip_h, flip_v):
    out = np.rot90(arr, rot, axes=(1, 2))
    if flip_h:
        out = out[:, :, ::-1]
    if flip_v:
        out = out[:, ::-1, :]
    return np.ascontiguousarray(out)


def _dihedral_inverse(arr, rot, flip_h, flip_v):
    out = arr
    if flip_v:
        out = out[:, ::-1, :]
    if flip_h:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(np.rot90(out, -rot, axes=(1, 2)))


def sample_batch(dataset, cfg, rng):
    """Draw one aligned batch: (LR (B,3,p,p), HR (B,3,p*s,p*s)).

    The draw sequence is a pure function of the generator state, so a
    seeded generator reproduces the whole schedule. Images smaller than
    the crop are passed over (with a one-time warning each).
    """
    s = dataset.scale
    p = cfg.patch
    eligible = [i for i, (lr, _) in enumerate(dataset.pairs)
                if lr.shape[1] >= p and lr.shape[2] >= p]
    if not eligible:
        raise DataError("no image can supply a %dx%d LR crop" % (p, p))
    if len(eligible) < len(dataset.pairs):
        skipped = len(dataset.pairs) - len(eligible)
        if not getattr(dataset, "_warned_small", False):
            warnings.warn("%d image(s) too small for %dx%d crops, skipped"
                          % (skipped, p, p))
            dataset._warned_small = True
    lr_batch = np.empty((cfg.batch, 3, p, p))
    hr_batch = np.empty((cfg.batch, 3, p * s, p * s))
    for b in range(cfg.batch):
        lr, hr = dataset.pairs[eligible[int(rng.integers(len(eligible)))]]
        y = int(rng.integers(lr.shape[1] - p + 1))
        x = int(rng.integers(lr.shape[2] - p + 1))
        lr_crop = lr[:, y:y + p, x:x + p]
        hr_crop = hr[:, y * s:(y + p) * s, x * s:(x + p) * s]
        if cfg.augment:
            rot = int(rng.integers(4))
            fh = int(rng.integers(2))
            fv = int(rng.integers(2))
            lr_crop = _dihedral(lr_crop, rot, fh, fv)
            hr_crop = _dihedral(hr_crop, rot, fh, fv)
        lr_batch[b] = lr_crop
        hr_batch[b] = hr_crop
    return lr_batch, hr_batch


# ---------------------------------------------------------------------------
# loop


def train(model, dataset, cfg, emit=None, checkpoint_path=None,
          checkpoint_every=0):
    """Run the full schedule; returns the per-iteration loss history.

    emit, when given, receives one record dict per iteration. When
    checkpoint_path is set the model is saved at the end and, if
    checkpoint_every > 0, every that-many iterations along the way.
    """
    from .model import save_checkpoint
    rng = np.random.default_rng(cfg.seed)
    named = model.parameters()
    params = [t for _, t in named]
    state = AdamState(params)
    history = []
    for it in range(cfg.iters):
        t0 = time.perf_counter()
        lr_b, hr_b = sample_batch(dataset, cfg, rng)
        model.zero_grad()
        sr, _ = model.forward(ad.Tensor(lr_b), "train")
        total, pixel, freq = combined_loss_parts(sr, ad.Tensor(hr_b), cfg.fft_weight)
        total.backward()
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data)
                 for t in params]
        rate = lr_at(it, cfg)
        adam_step(params, grads, state, rate)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        loss = float(total.data)
        history.append(loss)
        if emit is not None:
            emit({"iter": it, "loss": loss, "pixel": pixel, "fft": freq,
                  "lr": rate, "wall_ms": round(wall_ms, 3)})
        if checkpoint_path and checkpoint_every and (it + 1) % checkpoint_every == 0:
            save_checkpoint(model, checkpoint_path)
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path)
    return history
