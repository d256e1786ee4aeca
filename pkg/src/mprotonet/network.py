"""Prototype network with an attention-map localization layer, plus baselines.

Tensor layout is ``(batch, channels, H, W, D)``. All prototype-level
quantities keep the batch dimension first.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .volume_io import CLASSES, INPUT_SHAPE, ConfigurationError

SOFT_MASK_OMEGA = 10.0
SOFT_MASK_SIGMA = 0.5
FEATURE_SHAPE = tuple(n // 8 for n in INPUT_SHAPE)


class ShapeError(ValueError):
    pass


class Mode(str, enum.Enum):
    CNN = "CNN"
    PROTOPNET = "ProtoPNet"
    PROTO_AM = "Proto_AM"


@dataclass(frozen=True)
class ModelVariant:
    mode: Mode = Mode.PROTO_AM
    soft_masking: bool = True
    online_cam: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.mode != Mode.PROTO_AM and (self.soft_masking or self.online_cam):
            raise ConfigurationError("soft masking / online-CAM need the attention-map mode")

    @property
    def name(self) -> str:
        for name, v in VARIANTS.items():
            if v == self:
                return name
        return f"{self.mode.value}(sm={int(self.soft_masking)},oc={int(self.online_cam)})"

    @property
    def has_prototypes(self) -> bool:
        return self.mode != Mode.CNN

    def to_dict(self) -> dict:
        return {"mode": self.mode.value, "soft_masking": self.soft_masking, "online_cam": self.online_cam}

    @classmethod
    def from_name(cls, name: str) -> "ModelVariant":
        try:
            return VARIANTS[name]
        except KeyError:
            raise ConfigurationError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None


VARIANTS = {
    "CNN": ModelVariant(Mode.CNN, False, False),
    "ProtoPNet": ModelVariant(Mode.PROTOPNET, False, False),
    "XProtoNet": ModelVariant(Mode.PROTO_AM, False, False),
    "MProtoNet_A": ModelVariant(Mode.PROTO_AM, True, False),
    "MProtoNet_B": ModelVariant(Mode.PROTO_AM, False, True),
    "MProtoNet_C": ModelVariant(Mode.PROTO_AM, True, True),
}


@dataclass
class BackboneConfig:
    """Width/depth of the 3D residual feature layer and the prototype layout.

    ``stem="classic"`` is a 7x7x7 stride-2 convolution plus max pooling;
    ``stem="patchify"`` is a single 4x4x4 stride-4 convolution, far cheaper on
    CPU. Both reach the same 8x total downsampling.
    """

    stem: str = "classic"
    stem_channels: int = 64
    widths: tuple = (64, 128)
    blocks: tuple = (3, 8)
    expansion: int = 4
    embedding_channels: int = 128
    prototypes_per_class: int = 15
    input_shape: tuple = INPUT_SHAPE
    protopnet_alpha: float = 0.01

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.blocks = tuple(self.blocks)
        self.input_shape = tuple(self.input_shape)
        if self.embedding_channels < 1 or self.prototypes_per_class < 1:
            raise ConfigurationError("embedding channels and prototypes per class must be positive")
        if any(n % 8 for n in self.input_shape):
            raise ConfigurationError("input shape must be divisible by 8")

    @property
    def feature_channels(self) -> int:
        return self.widths[-1] * self.expansion

    @property
    def n_prototypes(self) -> int:
        return self.prototypes_per_class * len(CLASSES)

    @property
    def feature_shape(self) -> tuple:
        return tuple(n // 8 for n in self.input_shape)

    @classmethod
    def paper(cls) -> "BackboneConfig":
        return cls()

    @classmethod
    def toy(cls, **overrides) -> "BackboneConfig":
        base = dict(stem="patchify", stem_channels=16, widths=(16, 32), blocks=(1, 1))
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PrototypeBank:
    vectors: torch.Tensor
    class_of: torch.Tensor
    provenance: list = field(default_factory=list)


@dataclass
class ForwardTrace:
    F: torch.Tensor
    G: torch.Tensor
    p: torch.Tensor
    logits: torch.Tensor
    M0: Optional[torch.Tensor] = None
    M: Optional[torch.Tensor] = None
    I: Optional[torch.Tensor] = None
    H: Optional[torch.Tensor] = None
    S: Optional[torch.Tensor] = None
    similarity_field: Optional[torch.Tensor] = None


# ---------------------------------------------------------------------------
# elementary operations
# ---------------------------------------------------------------------------


def soft_mask(m0: torch.Tensor, omega: float = SOFT_MASK_OMEGA, sigma: float = SOFT_MASK_SIGMA) -> torch.Tensor:
    return torch.sigmoid(omega * (m0 - sigma))


def pool_features(g: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Attention-weighted spatial mean: (B,E,*S), (B,K,*S) -> (B,K,E)."""
    if g.shape[2:] != m.shape[2:]:
        raise ShapeError(f"spatial shapes differ: {tuple(g.shape[2:])} vs {tuple(m.shape[2:])}")
    n = g.shape[2:].numel()
    return torch.einsum("bkn,ben->bke", m.flatten(2), g.flatten(2)) / n


def cosine_similarity(h: torch.Tensor, p: torch.Tensor, dim: int = -1, eps: float = 1e-12) -> torch.Tensor:
    """Cosine similarity along ``dim``; zero vectors give 0 with zero gradient."""
    h_norm2 = (h * h).sum(dim)
    p_norm2 = (p * p).sum(dim)
    ok = (h_norm2 > eps) & (p_norm2 > eps)
    denom = torch.sqrt(torch.where(ok, h_norm2 * p_norm2, torch.ones_like(h_norm2)))
    # clamp absorbs float rounding just outside [-1, 1]
    return torch.where(ok, (h * p).sum(dim) / denom, torch.zeros_like(denom)).clamp(-1.0, 1.0)


def classify(s: torch.Tensor, w_cls: torch.Tensor) -> torch.Tensor:
    return torch.softmax(s @ w_cls, dim=-1)


def protopnet_similarity(g: torch.Tensor, prototypes: torch.Tensor, alpha: float = 0.01):
    """Per-location cosine similarity and top-alpha average pooling.

    Returns ``(S, field)`` with ``field`` of shape (B, K, *spatial).
    """
    b, e = g.shape[:2]
    flat = g.flatten(2)  # B,E,N
    sim = cosine_similarity(flat.unsqueeze(1), prototypes.view(1, -1, e, 1), dim=2)  # B,K,N
    n_top = max(1, int(np.floor(alpha * flat.shape[-1] + 1e-9)))
    top = torch.topk(sim, n_top, dim=-1).values
    return top.mean(-1), sim.view(b, -1, *g.shape[2:])


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------


class Bottleneck(nn.Module):
    def __init__(self, cin: int, width: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, width, 1, bias=False)
        self.bn1 = nn.BatchNorm3d(width)
        self.conv2 = nn.Conv3d(width, width, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm3d(width)
        self.conv3 = nn.Conv3d(width, cout, 1, bias=False)
        self.bn3 = nn.BatchNorm3d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv3d(cin, cout, 1, stride, bias=False), nn.BatchNorm3d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + (x if self.shortcut is None else self.shortcut(x)))


class Backbone(nn.Module):
    """3D ResNet truncated after its second stage (8x downsampling)."""

    def __init__(self, cfg: BackboneConfig, in_channels: int = 4):
        super().__init__()
        self.cfg = cfg
        c = cfg.stem_channels
        if cfg.stem == "classic":
            self.stem = nn.Sequential(
                nn.Conv3d(in_channels, c, 7, 2, 3, bias=False),
                nn.BatchNorm3d(c),
                nn.ReLU(inplace=True),
                nn.MaxPool3d(3, 2, 1),
            )
        elif cfg.stem == "patchify":
            self.stem = nn.Sequential(nn.Conv3d(in_channels, c, 4, 4, bias=False), nn.BatchNorm3d(c), nn.ReLU(inplace=True))
        else:
            raise ConfigurationError(f"unknown stem {cfg.stem!r}")
        layers, cin = [], c
        for stage, (width, n_blocks) in enumerate(zip(cfg.widths, cfg.blocks)):
            cout = width * cfg.expansion
            blocks = []
            for i in range(n_blocks):
                stride = 2 if (stage > 0 and i == 0) else 1
                blocks.append(Bottleneck(cin, width, cout, stride))
                cin = cout
            layers.append(nn.Sequential(*blocks))
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        expected = tuple(self.cfg.input_shape)
        if x.dim() != 5 or x.shape[1] != 4 or tuple(x.shape[2:]) != expected:
            raise ShapeError(f"expected input (B, 4, {', '.join(map(str, expected))}), got {tuple(x.shape)}")
        return self.layers(self.stem(x))


def feature_forward(x: torch.Tensor, backbone: Backbone) -> torch.Tensor:
    return backbone(x)


class MProtoNet(nn.Module):
    """Feature, localization, prototype and classification layers.

    The classification weight ``last_layer`` is stored as a (K, 2) matrix
    (E x 2 for the CNN baseline) so that logits are ``S @ last_layer``.
    """

    def __init__(self, variant: ModelVariant, cfg: BackboneConfig):
        super().__init__()
        self.variant = variant
        self.cfg = cfg
        e, k = cfg.embedding_channels, cfg.n_prototypes
        self.features = Backbone(cfg)
        self.add_on = nn.Sequential(
            nn.Conv3d(cfg.feature_channels, e, 1),
            nn.ReLU(),
            nn.Conv3d(e, e, 1),
            nn.Sigmoid(),
        )
        self.mapping = None
        self.conv_map = None
        if variant.mode == Mode.PROTO_AM:
            self.mapping = nn.Sequential(
                nn.Conv3d(cfg.feature_channels, e, 1),
                nn.ReLU(),
                nn.Conv3d(e, e, 1),
                nn.ReLU(),
            )
            self.conv_map = nn.Conv3d(e, k, 1, bias=False)

        n_cls = len(CLASSES)
        if variant.has_prototypes:
            self.prototypes = nn.Parameter(torch.rand(k, e))
            class_of = torch.arange(k) // cfg.prototypes_per_class
            self.register_buffer("class_of", class_of)
            identity = F.one_hot(class_of, n_cls).float()
            # own-class +1, other-class -0.5
            self.last_layer = nn.Parameter(identity - 0.5 * (1 - identity))
        else:
            self.register_buffer("class_of", torch.zeros(0, dtype=torch.long))
            self.last_layer = nn.Parameter(torch.randn(e, n_cls) * (1.0 / e) ** 0.5)
        self.provenance: list = [None] * (k if variant.has_prototypes else 0)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm3d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def head_parameters(self):
        return [self.last_layer]

    def body_parameters(self):
        return [p for n, p in self.named_parameters() if n != "last_layer"]

    def prototype_bank(self) -> PrototypeBank:
        return PrototypeBank(self.prototypes.detach().clone(), self.class_of.clone(), list(self.provenance))

    def forward(self, x: torch.Tensor) -> ForwardTrace:
        f = self.features(x)
        g = self.add_on(f)
        mode = self.variant.mode
        if mode == Mode.CNN:
            logits = g.mean(dim=(2, 3, 4)) @ self.last_layer
            return ForwardTrace(F=f, G=g, p=torch.softmax(logits, -1), logits=logits)
        if mode == Mode.PROTOPNET:
            s, sim_field = protopnet_similarity(g, self.prototypes, self.cfg.protopnet_alpha)
            logits = s @ self.last_layer
            return ForwardTrace(F=f, G=g, p=torch.softmax(logits, -1), logits=logits, S=s, similarity_field=sim_field)
        i = self.mapping(f)
        m0 = torch.sigmoid(self.conv_map(i))
        m = soft_mask(m0) if self.variant.soft_masking else m0
        h = pool_features(g, m)
        s = cosine_similarity(h, self.prototypes.unsqueeze(0))
        logits = s @ self.last_layer
        return ForwardTrace(F=f, G=g, p=torch.softmax(logits, -1), logits=logits, M0=m0, M=m, I=i, H=h, S=s)


def build_model(variant: ModelVariant, cfg: BackboneConfig, seed: Optional[int] = None) -> MProtoNet:
    if seed is not None:
        torch.manual_seed(seed)
    return MProtoNet(variant, cfg)


def forward_trace(x: torch.Tensor, variant: ModelVariant, model: MProtoNet) -> ForwardTrace:
    if model.variant != variant:
        raise ConfigurationError(f"model built as {model.variant.name}, asked for {variant.name}")
    return model(x)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

MAGIC = b"MPROTO1\n"


def write_container(path, header: dict, arrays: dict) -> None:
    """Binary container: magic, u64 header length, JSON header, raw array blobs."""
    index, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps({**header, "arrays": index}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def read_container(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not an MPROTO1 checkpoint")
    (n,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(data[start : start + n])
    base = start + n
    arrays = {}
    for item in header.pop("arrays"):
        buf = data[base + item["offset"] : base + item["offset"] + item["nbytes"]]
        arrays[item["name"]] = np.frombuffer(buf, dtype=np.dtype(item["dtype"])).reshape(item["shape"]).copy()
    return header, arrays


def model_arrays(model: MProtoNet) -> dict:
    arrays = {f"model/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    for k, prov in enumerate(model.provenance):
        if prov is not None and prov.get("attention") is not None:
            arrays[f"provenance/{k}/attention"] = np.asarray(prov["attention"], dtype=np.float32)
    return arrays


def model_header(model: MProtoNet) -> dict:
    prov = [
        None if p is None else {key: val for key, val in p.items() if key != "attention"}
        for p in model.provenance
    ]
    return {"format": "MPROTO1", "variant": model.variant.to_dict(), "backbone": model.cfg.to_dict(), "provenance": prov}


def save_checkpoint(path, model: MProtoNet, extra_header: Optional[dict] = None, extra_arrays: Optional[dict] = None) -> None:
    header = model_header(model)
    header.update(extra_header or {})
    arrays = model_arrays(model)
    arrays.update(extra_arrays or {})
    write_container(path, header, arrays)


def model_from_container(header: dict, arrays: dict) -> MProtoNet:
    variant = ModelVariant(**header["variant"])
    model = MProtoNet(variant, BackboneConfig(**header["backbone"]))
    state = {k[len("model/") :]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("model/")}
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise ConfigurationError(f"checkpoint lacks weights for {sorted(missing)[:3]}...")
    model.load_state_dict(state)
    prov = header.get("provenance") or []
    for k, p in enumerate(prov):
        if p is not None:
            p = dict(p)
            p["attention"] = arrays.get(f"provenance/{k}/attention")
            model.provenance[k] = p
    return model


def load_checkpoint(path):
    """Returns ``(model, header, arrays)``."""
    header, arrays = read_container(path)
    return model_from_container(header, arrays), header, arrays
