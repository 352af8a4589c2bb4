"""Three-stage training: masked-prediction pretraining, ASR pretraining,
and turn-token fine-tuning, with separate encoder/decoder optimizers,
transformer learning-rate schedules, and per-tensor freeze enforcement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import fileio
from .bestrq import (
    HEAD_BIAS,
    HEAD_WEIGHT,
    QUANTIZER_CODEBOOK,
    QUANTIZER_PROJECTION,
    BestRqConfig,
    RandomQuantizer,
    apply_mask,
    downsample_labels,
    downsample_mask,
    make_quantizer,
    masked_cross_entropy,
    quantize,
    sample_mask,
)
from .checkpoint import Checkpoint, save_checkpoint
from .corpus import Utterance, Vocabulary, make_target
from .ctc import ctc_loss
from .encoder import (
    ModelConfig,
    attach_language,
    decoder_projection,
    encoder_forward,
    feature_encoder,
    init_decoder_parameters,
    init_parameters,
    make_leaves,
    select_trainable,
)
from .features import FeatureMatrix, SpecAugmentPolicy, compute_norm_stats, mvn, specaugment

STAGES = ("bestrq", "asr", "scd")

# nats/frame far beyond anything a finite model can justify
LOSS_CEILING = 1e6
F32_MAX = float(np.finfo(np.float32).max)


class TrainingDiverged(RuntimeError):
    """Raised when the training loss turns NaN/inf or explodes."""


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to the peak, then inverse-square-root decay."""

    peak: float
    warmup_steps: int

    def __post_init__(self):
        if not self.peak > 0:
            raise ValueError("peak learning rate must be positive")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be at least 1")

    def to_dict(self) -> dict:
        return {"peak": self.peak, "warmup_steps": self.warmup_steps}

    @classmethod
    def from_dict(cls, d: dict) -> "LrSchedule":
        return cls(**d)


def lr_at(schedule: LrSchedule, step: int) -> float:
    """lr = peak * min(step/warmup, sqrt(warmup/step)); both branches meet
    at the peak when step == warmup_steps."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    w = schedule.warmup_steps
    return schedule.peak * min(step / w, math.sqrt(w / step))


@dataclass(frozen=True)
class TrainConfig:
    stage: str
    steps: int
    batch_size: int
    seed: int = 0
    enc_schedule: LrSchedule = LrSchedule(peak=3e-4, warmup_steps=6000)
    dec_schedule: LrSchedule = LrSchedule(peak=5e-4, warmup_steps=2000)
    freeze: str = "all"
    mvn: str = "utterance"  # "utterance" | "none"
    vocab_mode: str = "word"
    trailing_st: bool = False
    checkpoint_every: int = 200
    bestrq: BestRqConfig = field(default_factory=BestRqConfig)
    spec_augment: SpecAugmentPolicy | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.mvn not in ("utterance", "none"):
            raise ValueError(f"unknown mvn mode {self.mvn!r}")

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "steps": self.steps,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "enc_schedule": self.enc_schedule.to_dict(),
            "dec_schedule": self.dec_schedule.to_dict(),
            "freeze": self.freeze,
            "mvn": self.mvn,
            "vocab_mode": self.vocab_mode,
            "trailing_st": self.trailing_st,
            "checkpoint_every": self.checkpoint_every,
            "bestrq": self.bestrq.to_dict(),
            "spec_augment": None
            if self.spec_augment is None
            else {
                "n_time_masks": self.spec_augment.n_time_masks,
                "max_time_width_frames": self.spec_augment.max_time_width_frames,
                "n_freq_masks": self.spec_augment.n_freq_masks,
                "max_freq_width_bins": self.spec_augment.max_freq_width_bins,
                "mask_value": self.spec_augment.mask_value,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        if "enc_schedule" in d:
            d["enc_schedule"] = LrSchedule.from_dict(d["enc_schedule"])
        if "dec_schedule" in d:
            d["dec_schedule"] = LrSchedule.from_dict(d["dec_schedule"])
        if "bestrq" in d:
            d["bestrq"] = BestRqConfig.from_dict(d["bestrq"])
        if d.get("spec_augment") is not None:
            d["spec_augment"] = SpecAugmentPolicy(**d["spec_augment"])
        return cls(**d)


class AdamGroup:
    """Adam with bias-corrected first/second moments over a named tensor
    group; the learning rate follows the group's schedule. Updates are
    in place so shared autodiff leaves stay valid."""

    def __init__(self, names: list[str], schedule: LrSchedule,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.names = list(names)
        self.schedule = schedule
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def current_lr(self) -> float:
        return lr_at(self.schedule, max(self.t, 1))

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> float:
        self.t += 1
        lr = lr_at(self.schedule, self.t)
        b1, b2 = self.beta1, self.beta2
        for name in self.names:
            g = grads.get(name)
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            params[name] -= lr * mhat / (np.sqrt(vhat) + self.eps)
        return lr


def param_group(name: str) -> str:
    return "dec" if name.startswith(("decoder/", "bestrq_head/")) else "enc"


@dataclass
class Sample:
    """One prepared training example: normalized features plus the
    stage-appropriate target."""

    id: str
    feats: np.ndarray  # (T, D) after optional per-utterance MVN
    language_id: int
    target: tuple[int, ...] | None = None  # ctc stages
    labels: np.ndarray | None = None  # quantizer labels, pretraining stage


def prepare_samples(
    utterances: list[Utterance],
    features_by_id: dict[str, FeatureMatrix],
    cfg: TrainConfig,
    vocab: Vocabulary,
    quantizer: RandomQuantizer | None = None,
) -> list[Sample]:
    samples = []
    for utt in utterances:
        fm = features_by_id[utt.id]
        feats = mvn(fm, compute_norm_stats(fm)).frames if cfg.mvn == "utterance" else fm.frames
        target = None
        labels = None
        if cfg.stage in ("asr", "scd"):
            seq = make_target(utt, vocab, trailing_st=cfg.trailing_st)
            ids = seq.ids
            if cfg.stage == "asr":
                # ASR pretraining sees the same transcripts with the turn
                # token stripped out of the target.
                ids = tuple(i for i in ids if i != vocab.st_id)
            target = ids
        elif quantizer is not None:
            # the trainer quantizes lazily when no quantizer exists yet
            labels = quantize(quantizer, feats)
        samples.append(Sample(id=utt.id, feats=feats, language_id=utt.language_id,
                              target=target, labels=labels))
    return samples


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    model_config: ModelConfig
    vocab: Vocabulary
    quantizer: RandomQuantizer | None
    log_rows: list[dict]
    skipped_total: int

    @property
    def final_loss(self) -> float | None:
        for row in reversed(self.log_rows):
            if row["loss"] is not None:
                return row["loss"]
        return None


def _derived_seed(*parts: int) -> int:
    ss = np.random.SeedSequence(list(parts))
    return int(ss.generate_state(1)[0])


class Trainer:
    """Owns the parameters and applies deterministic, order-fixed updates.

    Tensors whose trainable flag is off are never touched: they receive no
    gradients and the optimizers skip them, so their bytes are identical
    before and after any number of steps.
    """

    def __init__(
        self,
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        samples: list[Sample],
        vocab: Vocabulary,
        params: dict[str, np.ndarray] | None = None,
        quantizer: RandomQuantizer | None = None,
    ):
        if not samples:
            raise ValueError("no training samples")
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.samples = samples
        self.vocab = vocab
        # own a private copy: updates are applied in place and must never
        # leak into a caller's (possibly reused) parameter dict
        if params is None:
            self.params = init_parameters(model_cfg)
        else:
            self.params = {n: np.array(v, dtype=np.float64) for n, v in params.items()}
        self.quantizer = quantizer

        if train_cfg.stage == "bestrq":
            if self.quantizer is None:
                self.quantizer = make_quantizer(samples[0].feats.shape[1], train_cfg.bestrq)
            if HEAD_WEIGHT not in self.params:
                rng = np.random.default_rng(_derived_seed(model_cfg.seed, 2))
                dm, K = model_cfg.model_dim, self.quantizer.codebook_size
                self.params[HEAD_WEIGHT] = rng.uniform(-math.sqrt(3.0 / dm), math.sqrt(3.0 / dm), size=(dm, K))
                self.params[HEAD_BIAS] = np.zeros(K)
            for s in self.samples:
                if s.labels is None:
                    s.labels = quantize(self.quantizer, s.feats)

        self.trainable = select_trainable(self.params, train_cfg.freeze, model_cfg.n_layers)
        self.leaves = make_leaves(self.params, self.trainable)
        trainable_names = [n for n, flag in self.trainable.items() if flag]
        self.opt_enc = AdamGroup([n for n in trainable_names if param_group(n) == "enc"], train_cfg.enc_schedule)
        self.opt_dec = AdamGroup([n for n in trainable_names if param_group(n) == "dec"], train_cfg.dec_schedule)
        self._order_rng = np.random.default_rng(_derived_seed(train_cfg.seed, 1))
        self._queue: list[int] = []
        self.step_no = 0
        self.skipped_total = 0
        self.log_rows: list[dict] = []

    def _next_batch(self) -> list[int]:
        while len(self._queue) < self.cfg.batch_size:
            self._queue.extend(self._order_rng.permutation(len(self.samples)).tolist())
        batch, self._queue = self._queue[: self.cfg.batch_size], self._queue[self.cfg.batch_size :]
        return batch

    def _forward_hidden(self, feats: np.ndarray, language_id: int):
        h = feature_encoder(self.leaves, feats)
        h = attach_language(self.leaves, h, language_id, self.model_cfg.n_languages)
        return encoder_forward(self.leaves, h, self.model_cfg)

    def _sample_features(self, sample: Sample, step: int, idx: int) -> np.ndarray:
        feats = sample.feats
        if self.cfg.spec_augment is not None and self.cfg.stage != "bestrq":
            fm = FeatureMatrix(feats)
            seed = _derived_seed(self.cfg.seed, 3, step, idx)
            feats = specaugment(fm, self.cfg.spec_augment, seed).frames
        return feats

    def train_step(self, batch_indices: list[int] | None = None) -> dict:
        """One optimizer step over a batch; returns the log row."""
        self.step_no += 1
        batch = self._next_batch() if batch_indices is None else list(batch_indices)
        for leaf in self.leaves.values():
            leaf.zero_grad()

        B = len(batch)
        loss_sum = 0.0
        contributed = 0
        skipped = 0
        for idx in batch:
            sample = self.samples[idx]
            feats = self._sample_features(sample, self.step_no, idx)
            if self.cfg.stage == "bestrq":
                spec = sample_mask(
                    feats.shape[0],
                    self.cfg.bestrq.span_frames,
                    self.cfg.bestrq.mask_prob,
                    _derived_seed(self.cfg.seed, 4, self.step_no, idx),
                )
                ds_mask = downsample_mask(spec.mask)
                if not ds_mask.any():
                    skipped += 1
                    continue
                hidden = self._forward_hidden(apply_mask(feats, spec.mask), sample.language_id)
                logits = ad.log_softmax(
                    ad.add(ad.matmul(hidden, self.leaves[HEAD_WEIGHT]), self.leaves[HEAD_BIAS])
                )
                if not np.isfinite(logits.data).all():
                    raise TrainingDiverged(f"non-finite head outputs at step {self.step_no}")
                labels = downsample_labels(sample.labels)
                nll, seed_grad = masked_cross_entropy(logits.data, labels, ds_mask)
                logits.backward(seed_grad / B)
                loss_sum += nll / B
            else:
                hidden = self._forward_hidden(feats, sample.language_id)
                logp = decoder_projection(self.leaves, hidden)
                if not np.isfinite(logp.data).all():
                    raise TrainingDiverged(f"non-finite log posteriors at step {self.step_no}")
                res = ctc_loss(logp.data, sample.target, self.vocab.blank_id)
                if not res.alignable:
                    skipped += 1
                    continue
                t_out = logp.data.shape[0]
                logp.backward(res.grad / (t_out * B))
                loss_sum += res.nll / (t_out * B)
            contributed += 1

        self.skipped_total += skipped
        row: dict = {"step": self.step_no, "skipped": skipped}
        if contributed == 0:
            row.update({"loss": None, "lr_enc": None, "lr_dec": None})
            self.log_rows.append(row)
            return row
        if not math.isfinite(loss_sum) or loss_sum > LOSS_CEILING:
            self.log_rows.append({**row, "loss": loss_sum, "lr_enc": None, "lr_dec": None})
            raise TrainingDiverged(f"loss {loss_sum} diverged at step {self.step_no}")

        grads = {name: leaf.grad for name, leaf in self.leaves.items() if leaf.grad is not None}
        lr_enc = self.opt_enc.step(self.params, grads)
        lr_dec = self.opt_dec.step(self.params, grads)
        row.update({"loss": loss_sum, "lr_enc": lr_enc, "lr_dec": lr_dec})
        self.log_rows.append(row)
        return row

    def checkpoint_tensors(self) -> dict[str, np.ndarray]:
        tensors = dict(self.params)
        if self.quantizer is not None:
            tensors[QUANTIZER_PROJECTION] = np.asarray(self.quantizer.projection)
            tensors[QUANTIZER_CODEBOOK] = np.asarray(self.quantizer.codebook)
        return tensors

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        frozen = tuple(n for n, flag in self.trainable.items() if not flag)
        if self.quantizer is not None:
            frozen = frozen + (QUANTIZER_PROJECTION, QUANTIZER_CODEBOOK)
        meta = {
            "stage": self.cfg.stage,
            "step": self.step_no,
            "preproc": {
                "mvn": self.cfg.mvn,
                "vocab_mode": self.cfg.vocab_mode,
                "trailing_st": self.cfg.trailing_st,
            },
        }
        if extra:
            meta.update(extra)
        save_checkpoint(path, self.checkpoint_tensors(), self.model_cfg, self.vocab, frozen=frozen, extra=meta)

    def _params_serializable(self) -> bool:
        """A checkpoint must survive the float32 round trip."""
        return all(np.isfinite(v).all() and np.all(np.abs(v) < F32_MAX) for v in self.params.values())

    def run(self, log_path: str | Path | None = None, ckpt_path: str | Path | None = None) -> TrainResult:
        if ckpt_path is not None:
            self.save(ckpt_path)  # step-0 checkpoint so an abort always leaves a last-good file
        try:
            for _ in range(self.cfg.steps):
                self.train_step()
                if ckpt_path is not None and self.step_no % self.cfg.checkpoint_every == 0 and self._params_serializable():
                    self.save(ckpt_path)
        finally:
            if log_path is not None:
                fileio.write_jsonl(log_path, self.log_rows)
        if ckpt_path is not None and self._params_serializable():
            self.save(ckpt_path)
        return TrainResult(
            params=self.params,
            model_config=self.model_cfg,
            vocab=self.vocab,
            quantizer=self.quantizer,
            log_rows=self.log_rows,
            skipped_total=self.skipped_total,
        )


def quantizer_from_checkpoint(ckpt: Checkpoint, seed: int = 0) -> RandomQuantizer | None:
    if QUANTIZER_PROJECTION not in ckpt.tensors:
        return None
    return RandomQuantizer(
        projection=ckpt.tensors[QUANTIZER_PROJECTION],
        codebook=ckpt.tensors[QUANTIZER_CODEBOOK],
        seed=seed,
    )


def warm_start_scd(ckpt: Checkpoint, vocab: Vocabulary, decoder_seed: int | None = None) -> tuple[dict[str, np.ndarray], ModelConfig]:
    """Copy the pretrained encoder; reinitialize the decoder projection for
    the (possibly different) target vocabulary.

    Serves both the ASR warm start from the pretraining checkpoint and the
    turn-token fine-tune from the ASR checkpoint. Raises with the full list
    of offending tensors when encoder shapes disagree.
    """
    new_cfg = replace(ckpt.config, vocab_size=vocab.size)
    params = init_parameters(new_cfg)
    if decoder_seed is not None:
        params.update(init_decoder_parameters(new_cfg, decoder_seed))
    problems = []
    for name in params:
        if name.startswith("decoder/"):
            continue
        src = ckpt.tensors.get(name)
        if src is None:
            problems.append(f"{name}: missing from checkpoint")
        elif src.shape != params[name].shape:
            problems.append(f"{name}: checkpoint {src.shape} vs model {params[name].shape}")
        else:
            params[name] = src.copy()
    if problems:
        raise ValueError("warm start tensor mismatch: " + "; ".join(problems))
    return params, new_cfg
