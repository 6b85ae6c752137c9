"""Encoder, decoder, grasp head and the plain GGCNN-style baseline."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .quantizer import Codebook, QuantizationResult, quantize, straight_through
from .substrate import Tensor

GRASP_CHANNELS = 4


class ConfigurationError(ValueError):
    pass


@dataclass
class NetworkConfig:
    input_channels: int = 3
    input_size: int = 128
    downsample_factor: int = 4
    embedding_dim: int = 64
    codebook_size: int = 512
    beta: float = 0.25
    base_channels: int = 32
    grasp_channels: tuple = (16, 16, 8)
    grasp_kernels: tuple = (9, 5, 3)
    baseline_channels: tuple = (32, 16, 8)
    norm_groups: int = 8
    init_head_from_decoder: bool = False
    grasp_output_channels: int = field(default=GRASP_CHANNELS, init=False)

    def __post_init__(self):
        self.grasp_channels = tuple(self.grasp_channels)
        self.grasp_kernels = tuple(self.grasp_kernels)
        self.baseline_channels = tuple(self.baseline_channels)

    @property
    def n_down(self) -> int:
        return int(round(math.log2(self.downsample_factor)))

    @property
    def hidden_channels(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.n_down)]

    @property
    def latent_size(self) -> int:
        return self.input_size // self.downsample_factor

    def validate(self):
        f = self.downsample_factor
        if f < 2 or f & (f - 1):
            raise ConfigurationError(f"downsample_factor must be a power of 2 >= 2, got {f}")
        if self.input_size % f:
            raise ConfigurationError(
                f"input_size {self.input_size} not divisible by downsample_factor {f}")
        if self.input_size % 4:
            raise ConfigurationError("input_size must be divisible by 4 for the baseline network")
        if self.input_channels < 1 or self.embedding_dim < 1 or self.codebook_size < 2:
            raise ConfigurationError("channel counts must be positive and codebook_size >= 2")
        if len(self.grasp_channels) != len(self.grasp_kernels):
            raise ConfigurationError("grasp_channels and grasp_kernels must have equal length")
        if any(k % 2 == 0 for k in self.grasp_kernels):
            raise ConfigurationError("grasp_kernels must be odd to keep full resolution")
        for c in self.hidden_channels:
            if c % self.norm_groups:
                raise ConfigurationError(f"channel width {c} not divisible by norm_groups")
        if self.beta < 0:
            raise ConfigurationError("beta must be non-negative")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = {k: v for k, v in d.items() if k != "grasp_output_channels"}
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, groups: int = 8):
        super().__init__()
        self.block = nn.Sequential(
            nn.GroupNorm(groups, channels),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.GroupNorm(groups, channels),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 1),
        )

    def forward(self, x):
        return x + self.block(x)


class Encoder(nn.Module):
    """C x S x S image -> D x S/f x S/f continuous latents."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        config.validate()
        layers = []
        c_in = config.input_channels
        for c in config.hidden_channels:
            layers += [nn.Conv2d(c_in, c, 4, stride=2, padding=1), nn.ReLU()]
            c_in = c
        layers += [ResidualBlock(c_in, config.norm_groups),
                   ResidualBlock(c_in, config.norm_groups),
                   nn.ReLU()]
        self.body = nn.Sequential(*layers)
        self.project = nn.Conv2d(c_in, config.embedding_dim, 1)
        nn.init.zeros_(self.project.bias)

    def forward(self, x):
        return self.project(self.body(x))


class Decoder(nn.Module):
    """D x S/f x S/f latents -> C x S x S image in [0, 1].

    ``body`` is the part reused as the first stage of the grasp head; ``head``
    is the final projection to image channels.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        config.validate()
        hidden = config.hidden_channels
        layers = [nn.Conv2d(config.embedding_dim, hidden[-1], 1),
                  ResidualBlock(hidden[-1], config.norm_groups),
                  ResidualBlock(hidden[-1], config.norm_groups),
                  nn.ReLU()]
        outs = list(reversed(hidden[:-1])) + [hidden[0]]
        c_in = hidden[-1]
        for c in outs:
            layers += [nn.ConvTranspose2d(c_in, c, 4, stride=2, padding=1), nn.ReLU()]
            c_in = c
        self.body = nn.Sequential(*layers)
        self.out_channels = c_in
        self.head = nn.Sequential(nn.Conv2d(c_in, config.input_channels, 3, padding=1), nn.Sigmoid())

    def forward(self, z):
        return self.head(self.body(z))


class GraspOutputs(nn.Module):
    """Four parallel 1x1 heads: quality (sigmoid), sin 2phi, cos 2phi, width."""

    def __init__(self, c_in: int):
        super().__init__()
        self.quality = nn.Conv2d(c_in, 1, 1)
        self.angle_sin = nn.Conv2d(c_in, 1, 1)
        self.angle_cos = nn.Conv2d(c_in, 1, 1)
        self.width = nn.Conv2d(c_in, 1, 1)

    def forward(self, h):
        return torch.cat([torch.sigmoid(self.quality(h)), self.angle_sin(h),
                          self.angle_cos(h), self.width(h)], dim=1)


class GraspHead(nn.Module):
    """Decoder-structured stage followed by a full-resolution GGCNN-style stack."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.stage1 = Decoder(config).body
        c_in = config.hidden_channels[0]
        layers = []
        for c, k in zip(config.grasp_channels, config.grasp_kernels):
            layers += [nn.Conv2d(c_in, c, k, padding=k // 2), nn.ReLU()]
            c_in = c
        self.stage2 = nn.Sequential(*layers)
        self.outputs = GraspOutputs(c_in)

    def forward(self, z):
        return self.outputs(self.stage2(self.stage1(z)))


class GGCNN(nn.Module):
    """Image -> 4 grasp maps, no latent bottleneck (supervised baseline)."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        config.validate()
        a, b, c = config.baseline_channels
        self.body = nn.Sequential(
            nn.Conv2d(config.input_channels, a, 9, stride=2, padding=4), nn.ReLU(),
            nn.Conv2d(a, b, 5, stride=2, padding=2), nn.ReLU(),
            nn.Conv2d(b, c, 3, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(c, c, 3, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(c, b, 6, stride=2, padding=2), nn.ReLU(),
            nn.ConvTranspose2d(b, a, 10, stride=2, padding=4), nn.ReLU(),
        )
        self.outputs = GraspOutputs(a)

    def forward(self, x):
        return self.outputs(self.body(x))


def _seeded(seed):
    if seed is not None:
        torch.manual_seed(seed)


def build_encoder(config: NetworkConfig, seed: int | None = None) -> Encoder:
    _seeded(seed)
    return Encoder(config)


def build_decoder(config: NetworkConfig, seed: int | None = None) -> Decoder:
    _seeded(seed)
    return Decoder(config)


def build_codebook(config: NetworkConfig, seed: int | None = None) -> Codebook:
    g = None
    if seed is not None:
        g = torch.Generator().manual_seed(seed)
    return Codebook(config.codebook_size, config.embedding_dim, generator=g)


def build_grasp_head(config: NetworkConfig, seed: int | None = None,
                     decoder: Decoder | None = None) -> GraspHead:
    """Fresh grasp head; copies ``decoder``'s body weights when the config asks for it."""
    _seeded(seed)
    head = GraspHead(config)
    if config.init_head_from_decoder:
        if decoder is None:
            raise ConfigurationError("init_head_from_decoder needs a trained decoder")
        head.stage1.load_state_dict(decoder.body.state_dict())
    return head


def build_baseline(config: NetworkConfig, seed: int | None = None) -> GGCNN:
    _seeded(seed)
    return GGCNN(config)


def check_shapes(config: NetworkConfig):
    """Run a dummy batch through every network and check the declared shapes."""
    S, f, C, D = config.input_size, config.downsample_factor, config.input_channels, config.embedding_dim
    x = torch.zeros(1, C, S, S)
    with torch.no_grad():
        z = Encoder(config)(x)
        assert z.shape == (1, D, S // f, S // f), z.shape
        assert Decoder(config)(z).shape == x.shape
        assert GraspHead(config)(z).shape == (1, GRASP_CHANNELS, S, S)
        assert GGCNN(config)(x).shape == (1, GRASP_CHANNELS, S, S)


def _check_input(x: Tensor, channels: int):
    if x.dim() != 4 or x.shape[1] != channels or x.shape[2] != x.shape[3]:
        raise ValueError(f"expected a B x {channels} x S x S batch, got {tuple(x.shape)}")


def vqvae_forward(encoder: Encoder, codebook: Codebook, decoder: Decoder,
                  x: Tensor) -> tuple[Tensor, Tensor, QuantizationResult]:
    _check_input(x, encoder.body[0].in_channels)
    z_e = encoder(x)
    q = quantize(z_e, codebook)
    recon = decoder(straight_through(z_e, q.z_q))
    return recon, z_e, q


def is_frozen(*modules: nn.Module) -> bool:
    return all(not p.requires_grad for m in modules for p in m.parameters())


def freeze(*modules: nn.Module):
    for m in modules:
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)


def grasp_forward(encoder: Encoder, codebook: Codebook, grasp_head: GraspHead,
                  x: Tensor) -> Tensor:
    """Quantized latents of ``x`` through the grasp head: B x 4 x S x S maps.

    The encoder and codebook must already be frozen.
    """
    if not is_frozen(encoder, codebook):
        raise ConfigurationError("encoder and codebook must be frozen before grasp training")
    _check_input(x, encoder.body[0].in_channels)
    with torch.no_grad():
        z_q = quantize(encoder(x), codebook).z_q
    return grasp_head(z_q)


class VQVAE(nn.Module):
    def __init__(self, config: NetworkConfig, seed: int | None = None):
        super().__init__()
        self.config = config
        self.encoder = build_encoder(config, seed)
        self.codebook = build_codebook(config, seed)
        self.decoder = build_decoder(config)

    def forward(self, x):
        return vqvae_forward(self.encoder, self.codebook, self.decoder, x)


class ProposedGraspNet(nn.Module):
    """Frozen encoder + codebook feeding a trainable grasp head."""

    def __init__(self, config: NetworkConfig, encoder: Encoder, codebook: Codebook,
                 head: GraspHead):
        super().__init__()
        self.config = config
        self.encoder = encoder
        self.codebook = codebook
        self.head = head
        freeze(self.encoder, self.codebook)

    def forward(self, x):
        return grasp_forward(self.encoder, self.codebook, self.head, x)


class BaselineGraspNet(nn.Module):
    def __init__(self, config: NetworkConfig, net: GGCNN):
        super().__init__()
        self.config = config
        self.net = net

    def forward(self, x):
        _check_input(x, self.config.input_channels)
        return self.net(x)
