"""Range-recovery network: residual regression ``R_F = R + clamp(F(x))``."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encode import TARGET_CLAMP_MM, EncoderParams, SampleSet, build_dataset, encode_image
from .imagecore import AmplitudeImage, RangeImage
from .mlp import RANGE_SIZES, MlpModel, TrainConfig, decode_model, encode_model, forward, range_net, train

BUNDLE_MAGIC = b"TFR1"


@dataclass
class RangeRecoveryModel:
    encoder: EncoderParams
    net: MlpModel
    epoch_losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.net.layer_sizes != RANGE_SIZES or self.net.head != "linear":
            raise ValueError(f"range net must be {RANGE_SIZES} with a linear head, got {self.net.layer_sizes}")
        if self.encoder.input_size != self.net.input_size:
            raise ValueError("encoder and network input sizes differ")


def train_range_nn(triples, encoder: EncoderParams, config: TrainConfig) -> RangeRecoveryModel:
    """Train F on ``(calibrated_range, amplitude, reference)`` triples.

    If the encoder's amplitude span is unset it is taken from the training
    amplitudes.
    """
    triples = list(triples)
    if not encoder.ready:
        amps = np.concatenate([a.data[a.valid_mask].ravel() for _, a, _ in triples]) if triples else []
        if len(amps) == 0:
            raise ValueError("no training images")
        encoder = encoder.with_amplitude_span(amps)
    samples = build_dataset(triples, encoder, config.seed)
    return train_range_on_samples(samples, encoder, config)


def train_range_on_samples(samples: SampleSet, encoder: EncoderParams, config: TrainConfig) -> RangeRecoveryModel:
    if len(samples) == 0:
        raise ValueError("no eligible training pixels")
    result = train(range_net(config.seed), samples.inputs, samples.targets, config, "euclidean")
    return RangeRecoveryModel(encoder, result.model, result.epoch_losses)


def predict_residual(model: RangeRecoveryModel, rng_img: RangeImage, amp: AmplitudeImage):
    """Clamped network output at eligible pixels; returns ``(residual, eligible)``."""
    inputs, ys, xs = encode_image(rng_img, amp, model.encoder)
    res = np.zeros(rng_img.shape, dtype=np.float64)
    eligible = np.zeros(rng_img.shape, dtype=bool)
    if len(ys):
        out = forward(model.net, inputs)[:, 0]
        res[ys, xs] = np.clip(out, -TARGET_CLAMP_MM, TARGET_CLAMP_MM)
        eligible[ys, xs] = True
    return res, eligible


def recover_range(model: RangeRecoveryModel, rng_img: RangeImage, amp: AmplitudeImage) -> RangeImage:
    """``R_F``; the mask marks eligible pixels, others pass ``R`` through."""
    if rng_img.shape != amp.shape:
        raise ValueError("range and amplitude shapes differ")
    res, eligible = predict_residual(model, rng_img, amp)
    out = rng_img.data.astype(np.float64) + res
    out = np.where(eligible, np.maximum(out, 0.0), rng_img.data)
    return RangeImage(out, eligible)


def encode_bundle(meta: dict, net: MlpModel) -> bytes:
    blob = json.dumps(meta, sort_keys=True).encode()
    return BUNDLE_MAGIC + struct.pack("<I", len(blob)) + blob + encode_model(net)


def decode_bundle(buf: bytes) -> tuple[dict, MlpModel]:
    if len(buf) < 8 or buf[:4] != BUNDLE_MAGIC:
        raise ValueError("not a model bundle")
    (n,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + n:
        raise ValueError("truncated bundle metadata")
    meta = json.loads(buf[8:8 + n].decode())
    return meta, decode_model(buf[8 + n:])


def save_range_model(model: RangeRecoveryModel, path) -> None:
    meta = {"role": "range", "encoder": model.encoder.to_dict()}
    Path(path).write_bytes(encode_bundle(meta, model.net))


def load_range_model(path) -> RangeRecoveryModel:
    meta, net = decode_bundle(Path(path).read_bytes())
    if meta.get("role") != "range":
        raise ValueError(f"{path} is not a range model bundle")
    return RangeRecoveryModel(EncoderParams.from_dict(meta["encoder"]), net)
