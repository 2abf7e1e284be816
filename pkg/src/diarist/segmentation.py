"""Local segmentation network: features in, per-frame speaker activity out.

The network is a processing trunk (stacked BiLSTM or a chain of
bidirectional Mamba blocks behind an input-reduction linear) followed by a
small classification head.  Multilabel models emit one sigmoid activity per
speaker slot; powerset models emit a softmax distribution over speaker
subsets.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .core import FrameMatrix
from .errors import FormatError, NumericalError
from .labels import PowersetTable, powerset_table
from .seqnet import BiLstm, ExternalBiMamba, LstmConfig

HEAD_HIDDEN = 128

PROCESSING_KINDS = ("lstm", "mamba")
LOSS_TYPES = ("multilabel", "powerset")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and output-space configuration.

    Desk-scale defaults keep CPU training fast while exercising every code
    path; ``full_scale`` gives the large configuration (768 input features,
    256-wide Mamba trunk with 7 blocks, state size 64).
    """

    processing: str = "mamba"
    window: float = 10.0
    num_speakers: int = 3
    max_overlap: int = 2
    loss_type: str = "powerset"
    feature_dim: int = 40
    d_model: int = 64
    n_blocks: int = 2
    d_state: int = 16
    lstm_layers: int = 4
    lstm_hidden: int = 128

    def __post_init__(self):
        if self.processing not in PROCESSING_KINDS:
            raise ValueError(f"processing must be one of {PROCESSING_KINDS}")
        if self.loss_type not in LOSS_TYPES:
            raise ValueError(f"loss_type must be one of {LOSS_TYPES}")
        if self.window <= 0:
            raise ValueError("window must be positive")
        if self.num_speakers < 1:
            raise ValueError("num_speakers must be >= 1")
        if self.loss_type == "powerset" and not 1 <= self.max_overlap <= self.num_speakers:
            raise ValueError("need 1 <= max_overlap <= num_speakers for powerset output")
        for name in ("feature_dim", "d_model", "n_blocks", "d_state", "lstm_layers", "lstm_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        defaults = dict(
            feature_dim=768, d_model=256, n_blocks=7, d_state=64,
            num_speakers=4, max_overlap=2,
        )
        defaults.update(overrides)
        return cls(**defaults)

    @property
    def num_classes(self) -> int:
        if self.loss_type == "multilabel":
            return self.num_speakers
        return self.table().num_classes

    def table(self) -> PowersetTable:
        return powerset_table(self.num_speakers, self.max_overlap)


class SegmentationModel(nn.Module):
    """Fixed-window speaker segmentation network."""

    FORMAT_VERSION = 1

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        if config.processing == "lstm":
            lstm_config = LstmConfig(layers=config.lstm_layers, hidden=config.lstm_hidden)
            self.trunk = BiLstm(config.feature_dim, lstm_config)
            trunk_out = lstm_config.output_dim
        else:
            self.reduce = nn.Linear(config.feature_dim, config.d_model)
            self.blocks = nn.ModuleList(
                ExternalBiMamba(config.d_model, d_state=config.d_state)
                for _ in range(config.n_blocks)
            )
            trunk_out = config.d_model
        self.head = nn.Sequential(
            nn.Linear(trunk_out, HEAD_HIDDEN),
            nn.LeakyReLU(),
            nn.Linear(HEAD_HIDDEN, HEAD_HIDDEN),
            nn.LeakyReLU(),
            nn.Linear(HEAD_HIDDEN, config.num_classes),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Features (T, F) or (B, T, F) to probabilities over the last axis."""
        if self.config.processing == "lstm":
            x = self.trunk(x)
        else:
            x = self.reduce(x)
            for block in self.blocks:
                x = block(x)
        logits = self.head(x)
        if not torch.isfinite(logits).all():
            raise NumericalError("segmentation forward produced non-finite activations")
        if self.config.loss_type == "multilabel":
            return torch.sigmoid(logits)
        return torch.softmax(logits, dim=-1)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(config: ModelConfig, seed: int = 0) -> SegmentationModel:
    """Construct a model with deterministic parameter initialization."""
    torch.manual_seed(seed)
    return SegmentationModel(config)


def segment_forward(model: SegmentationModel, features) -> np.ndarray:
    """Inference convenience: numpy or FrameMatrix in, probability matrix out."""
    if isinstance(features, FrameMatrix):
        features = features.data
    data = torch.as_tensor(np.asarray(features), dtype=next(model.parameters()).dtype)
    if data.shape[-1] != model.config.feature_dim:
        raise ValueError(
            f"feature dim {data.shape[-1]} != configured {model.config.feature_dim}"
        )
    with torch.no_grad():
        return model(data).cpu().numpy()


# ---------------------------------------------------------------------------
# Checkpoint format: magic "SDMD", version, JSON config, named f32 tensors
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"SDMD"


def save_model(path, model: SegmentationModel) -> None:
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<I", SegmentationModel.FORMAT_VERSION))
    config_blob = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(config_blob)))
    buf.write(config_blob)
    for name, tensor in model.state_dict().items():
        data = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype=np.float32)
        name_blob = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_blob)))
        buf.write(name_blob)
        buf.write(struct.pack("<I", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, count: int, what: str) -> bytes:
    blob = fh.read(count)
    if len(blob) != count:
        raise FormatError(f"checkpoint truncated while reading {what}")
    return blob


def load_model(path) -> SegmentationModel:
    """Rebuild a model from its checkpoint; the stored config drives the rebuild."""
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != SegmentationModel.FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (config_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        try:
            config = ModelConfig(**json.loads(_read_exact(fh, config_len, "config")))
        except (ValueError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: bad embedded config: {exc}") from None
        tensors: dict[str, torch.Tensor] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "tensor rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "tensor dims"))
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            payload = _read_exact(fh, 4 * count, f"tensor {name!r}")
            data = np.frombuffer(payload, dtype="<f4").reshape(shape)
            tensors[name] = torch.from_numpy(data.copy())
    model = SegmentationModel(config)
    try:
        model.load_state_dict(tensors)
    except RuntimeError as exc:
        raise FormatError(f"{path}: tensors do not match config: {exc}") from None
    return model
