"""Three-stage orchestration: encoder -> representation diffusion -> image
generator, plus checkpoint conversion for each stage."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .config import ScheduleConfig, from_dict
from .data import Dataset
from .diffusion import make_schedule
from .encoder import Encoder, EncoderConfig, encode, normalize_rep
from .errors import ConfigError, DegenerateRepresentationError, FormatError, UsageError
from .imagegen import GenConfig, GenModel, GuidanceConfig, sample_images
from .io import ModelCheckpoint, load_checkpoint, save_checkpoint
from .rdm import RdmConfig, RdmModel, SamplerConfig, ddim_sample
from .rng import derive_seed

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def model_header(kind, model_cfg, schedule_cfg=None, **extra):
    header = {"kind": kind, "model": dataclasses.asdict(model_cfg)}
    if schedule_cfg is not None:
        header["schedule"] = dataclasses.asdict(schedule_cfg)
    header.update(extra)
    return header


def save_model(path, kind, model, schedule_cfg=None, **extra):
    header = model_header(kind, model.config, schedule_cfg, **extra)
    return save_checkpoint(path, header, model.named_parameters())


def _expect(ckpt: ModelCheckpoint, kind, path):
    found = ckpt.config.get("kind")
    if found != kind:
        raise FormatError(f"{path}: expected a {kind} checkpoint, found {found!r}")


def model_from_checkpoint(ckpt: ModelCheckpoint):
    kind = ckpt.config.get("kind")
    cls, cfg_cls = {
        "encoder": (Encoder, EncoderConfig),
        "rdm": (RdmModel, RdmConfig),
        "generator": (GenModel, GenConfig),
    }.get(kind, (None, None))
    if cls is None:
        raise FormatError(f"not a model checkpoint (kind={kind!r})")
    model = cls(from_dict(cfg_cls, ckpt.config["model"]))
    model.load_parameters(ckpt.tensors)
    if kind == "encoder":
        model.trained = bool(ckpt.config.get("trained", False))
    schedule = None
    if "schedule" in ckpt.config:
        schedule = from_dict(ScheduleConfig, ckpt.config["schedule"])
    return model, schedule


def load_model(path, kind):
    ckpt = load_checkpoint(path)
    _expect(ckpt, kind, path)
    return model_from_checkpoint(ckpt)


def schedule_of(cfg: ScheduleConfig):
    return make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)


# ---------------------------------------------------------------------------
# stage operations
# ---------------------------------------------------------------------------


@dataclass
class SampleBatch:
    images: np.ndarray  # [n, H, W] in [0, 1]
    conditions: np.ndarray  # [n, D] normalized representations fed to the generator
    rep_seeds: list = field(default_factory=list)
    image_seeds: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.image_seeds)

    def save(self, path):
        header = {"kind": "samples", "rep_seeds": [str(s) for s in self.rep_seeds],
                  "image_seeds": [str(s) for s in self.image_seeds], "meta": self.meta}
        return save_checkpoint(path, header, {"images": self.images.astype(np.float32),
                                              "conditions": self.conditions.astype(np.float32)})

    @classmethod
    def load(cls, path):
        ckpt = load_checkpoint(path)
        _expect(ckpt, "samples", path)
        return cls(ckpt.tensors["images"], ckpt.tensors["conditions"],
                   [int(s) for s in ckpt.config["rep_seeds"]],
                   [int(s) for s in ckpt.config["image_seeds"]], ckpt.config.get("meta", {}))


def extract_reps(encoder: Encoder, dataset: Dataset):
    """Encode and normalize every item. Returns ([n, D] float32, labels)."""
    raw = encode(dataset.images, encoder).astype(np.float64)
    try:
        reps = normalize_rep(raw) if len(raw) else raw
    except DegenerateRepresentationError as exc:
        raise DegenerateRepresentationError("degenerate representation", index=exc.index) from None
    return reps.astype(np.float32), np.asarray(dataset.labels, dtype=np.int64)


def _check_dims(rdm: RdmModel, gen: GenModel):
    if not gen.config.conditional:
        raise ConfigError("generator has no representation pathway")
    if rdm.config.rep_dim != gen.config.rep_dim:
        raise ConfigError(
            f"RDM produces {rdm.config.rep_dim}-d reps but the generator expects {gen.config.rep_dim}"
        )


def _normalize_rows(raw):
    try:
        return normalize_rep(raw)
    except DegenerateRepresentationError as exc:
        raise DegenerateRepresentationError("generated representation is degenerate",
                                            index=exc.index) from None


def sample_unconditional(n, rdm: RdmModel, gen: GenModel, schedule_cfg, rdm_sampler: SamplerConfig,
                         gen_sampler: SamplerConfig, guidance: GuidanceConfig | None, seed):
    """Representation first, then the image conditioned on it; item i uses
    streams derived from (seed, "rdm-sample", i) and (seed, "gen-sample", i)."""
    _check_dims(rdm, gen)
    schedule = schedule_of(schedule_cfg)
    rep_seeds = [derive_seed(seed, "rdm-sample", i) for i in range(n)]
    img_seeds = [derive_seed(seed, "gen-sample", i) for i in range(n)]
    if n == 0:
        return SampleBatch(np.zeros((0,) + gen.config.image_shape), np.zeros((0, gen.config.rep_dim)))
    raw = ddim_sample(rdm, schedule, rdm_sampler, n=n, seeds=rep_seeds)
    reps = _normalize_rows(raw)
    images = sample_images(gen, reps, schedule, gen_sampler, guidance, img_seeds)
    meta = {"mode": "unconditional", "seed": seed, "tau": guidance.tau if guidance else 0.0}
    return SampleBatch(images, reps, rep_seeds, img_seeds, meta)


def sample_class_conditional(cls, n, cond_rdm: RdmModel, gen: GenModel, schedule_cfg,
                             rdm_sampler: SamplerConfig, gen_sampler: SamplerConfig,
                             guidance: GuidanceConfig | None, seed):
    if not cond_rdm.config.conditional:
        raise UsageError("sample_class_conditional needs a class-conditional RDM")
    if not 0 <= cls < cond_rdm.config.num_classes:
        raise UsageError(f"class {cls} outside [0, {cond_rdm.config.num_classes})")
    _check_dims(cond_rdm, gen)
    schedule = schedule_of(schedule_cfg)
    rep_seeds = [derive_seed(seed, "rdm-class-sample", cls, i) for i in range(n)]
    img_seeds = [derive_seed(seed, "gen-sample", cls, i) for i in range(n)]
    raw = ddim_sample(cond_rdm, schedule, rdm_sampler, n=n, seeds=rep_seeds, class_label=cls)
    reps = _normalize_rows(raw) if n else raw
    images = sample_images(gen, reps if n else None, schedule, gen_sampler, guidance, img_seeds)
    meta = {"mode": "class", "class": cls, "seed": seed, "tau": guidance.tau if guidance else 0.0}
    return SampleBatch(images, reps, rep_seeds, img_seeds, meta)


def variations(reference_image, n, encoder: Encoder, gen: GenModel, schedule_cfg,
               gen_sampler: SamplerConfig, guidance: GuidanceConfig | None, seeds):
    """Encode ``reference_image`` once and draw one image per seed conditioned on it."""
    if len(seeds) != n:
        raise UsageError(f"need {n} seeds, got {len(seeds)}")
    rep = normalize_rep(encode(reference_image, encoder)[0].astype(np.float64))
    reps = np.tile(rep, (n, 1))
    images = sample_images(gen, reps, schedule_of(schedule_cfg), gen_sampler, guidance, list(seeds))
    return SampleBatch(images, reps, [], list(seeds), {"mode": "variations"})


def interpolation_conditions(rep_a, rep_b, k):
    if k < 1:
        raise UsageError("interpolation needs k >= 1")
    out = [rep_a]
    for j in range(1, k):
        lam = j / k
        mixed = (1.0 - lam) * rep_a + lam * rep_b
        try:
            out.append(normalize_rep(mixed))
        except DegenerateRepresentationError:
            raise DegenerateRepresentationError(
                f"interpolant at lambda={lam:.3f} has zero variance") from None
    out.append(rep_b)
    return np.stack(out)


def interpolate(image_a, image_b, k, encoder: Encoder, gen: GenModel, schedule_cfg,
                gen_sampler: SamplerConfig, guidance: GuidanceConfig | None, seed):
    """k+1 images along the straight line between two representations, all
    drawn with the same noise seed so only the condition changes."""
    raw = encode(np.stack([np.asarray(image_a), np.asarray(image_b)]), encoder).astype(np.float64)
    rep_a, rep_b = normalize_rep(raw[0]), normalize_rep(raw[1])
    conds = interpolation_conditions(rep_a, rep_b, k)
    seeds = [seed] * (k + 1)
    images = sample_images(gen, conds, schedule_of(schedule_cfg), gen_sampler, guidance, seeds)
    return SampleBatch(images, conds, [], seeds, {"mode": "interpolate", "k": k})


def sample_baseline(n, gen: GenModel, schedule_cfg, gen_sampler: SamplerConfig, seed):
    """Null-conditioned samples (the matched unconditional baseline, tau = 0)."""
    img_seeds = [derive_seed(seed, "gen-sample", i) for i in range(n)]
    images = sample_images(gen, None, schedule_of(schedule_cfg), gen_sampler, None, img_seeds)
    D = gen.config.rep_dim
    return SampleBatch(images, np.zeros((n, D)), [], img_seeds, {"mode": "baseline", "seed": seed})
