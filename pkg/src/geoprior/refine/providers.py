"""Score providers: noise predictors queried by the distillation loop.

A provider answers ``predict(x_t, t, condition, pose)`` with a tensor shaped
like ``x_t`` (H, W, C).  ``parameterization`` says whether that output is an
epsilon or a v prediction; the loop converts to epsilon before use.
"""

from __future__ import annotations

import enum
import math
import struct
import subprocess
import sys
from typing import BinaryIO

import numpy as np
import torch
from torch import nn

from ..camera import SphericalPose
from ..fields import DTYPE
from .schedule import DiffusionSchedule, Parameterization, epsilon_from_v

SCORE_MAGIC = b"GDSP"


class ProviderKind(str, enum.Enum):
    ANALYTIC_GAUSSIAN = "ANALYTIC_GAUSSIAN"
    TRAINABLE_SMALL_NET = "TRAINABLE_SMALL_NET"
    EXTERNAL = "EXTERNAL"


class ProviderError(RuntimeError):
    pass


class ScoreProvider:
    kind: ProviderKind
    parameterization = Parameterization.EPSILON
    trainable = False

    def predict(self, x_t: torch.Tensor, t: int, condition: int = 0, pose: SphericalPose | None = None) -> torch.Tensor:
        raise NotImplementedError


def predict_epsilon(provider: ScoreProvider, x_t, t, schedule, condition=0, pose=None) -> torch.Tensor:
    out = provider.predict(x_t, t, condition, pose)
    if tuple(out.shape) != tuple(x_t.shape):
        raise ProviderError(f"provider returned shape {tuple(out.shape)} for input {tuple(x_t.shape)}")
    if provider.parameterization is Parameterization.V:
        out = epsilon_from_v(out, x_t, t, schedule)
    return out


def analytic_gaussian_score(x_t, t: int, mean, variance: float, schedule: DiffusionSchedule):
    """Exact epsilon prediction when the data distribution is N(mean, variance I).

    p_t = N(a mean, (a^2 s^2 + sigma^2) I) and eps_hat = -sigma grad log p_t.
    """
    if variance < 0:
        raise ValueError("variance must be non-negative")
    a, s = schedule.alpha(t), schedule.sigma(t)
    return s * (x_t - a * mean) / (a * a * variance + s * s)


class AnalyticGaussianScore(ScoreProvider):
    kind = ProviderKind.ANALYTIC_GAUSSIAN

    def __init__(self, mean, variance: float, schedule: DiffusionSchedule):
        self.mean = torch.as_tensor(np.asarray(mean, dtype=np.float64)) if not torch.is_tensor(mean) else mean
        self.variance = float(variance)
        self.schedule = schedule

    def predict(self, x_t, t, condition=0, pose=None):
        return analytic_gaussian_score(x_t, t, self.mean, self.variance, self.schedule)


def pose_features(pose: SphericalPose | None) -> torch.Tensor:
    if pose is None:
        return torch.zeros(4, dtype=DTYPE)
    az, el = math.radians(pose.azimuth), math.radians(pose.elevation)
    return torch.tensor([math.sin(az), math.cos(az), math.sin(el), math.cos(el)], dtype=DTYPE)


def timestep_features(t: int, steps: int, n_freq: int) -> torch.Tensor:
    x = t / max(steps, 1)
    freqs = 2.0 ** torch.arange(n_freq, dtype=DTYPE) * math.pi
    return torch.cat([torch.sin(freqs * x), torch.cos(freqs * x)])


class TrainableScoreNet(nn.Module, ScoreProvider):
    """Small camera-conditioned noise predictor standing in for the LoRA model.

    The noisy image is area-downsampled to ``side x side``, concatenated with
    a timestep embedding and (sin, cos) of the pose angles, pushed through an
    MLP (linear when ``hidden == 0``) and upsampled back by nearest neighbour.
    """

    kind = ProviderKind.TRAINABLE_SMALL_NET
    trainable = True

    def __init__(
        self,
        channels: int = 3,
        side: int = 8,
        hidden: int = 64,
        n_freq: int = 4,
        steps: int = 1000,
        parameterization: Parameterization = Parameterization.EPSILON,
        seed: int = 0,
        init_scale: float = 0.01,
    ):
        nn.Module.__init__(self)
        self.channels, self.side, self.n_freq, self.steps = channels, side, n_freq, steps
        self.parameterization = Parameterization(parameterization)
        n_in = side * side * channels + 2 * n_freq + 4
        n_out = side * side * channels
        gen = torch.Generator().manual_seed(seed)
        dims = [n_in, hidden, n_out] if hidden else [n_in, n_out]
        self.layers = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(dims[:-1], dims[1:]))
        with torch.no_grad():
            for layer in self.layers:
                layer.weight.normal_(0.0, init_scale, generator=gen)
                layer.bias.zero_()

    def inputs(self, x_t: torch.Tensor, t: int, pose=None) -> torch.Tensor:
        img = x_t.permute(2, 0, 1)[None]
        small = nn.functional.adaptive_avg_pool2d(img, self.side)[0].permute(1, 2, 0).reshape(-1)
        return torch.cat([small, timestep_features(t, self.steps, self.n_freq), pose_features(pose)])

    def forward(self, x_t: torch.Tensor, t: int, condition: int = 0, pose=None) -> torch.Tensor:
        h = self.inputs(x_t, t, pose)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = torch.relu(h)
        small = h.reshape(self.side, self.side, self.channels).permute(2, 0, 1)[None]
        H, W = x_t.shape[:2]
        full = nn.functional.interpolate(small, size=(H, W), mode="nearest")
        return full[0].permute(1, 2, 0)

    def predict(self, x_t, t, condition=0, pose=None):
        return self.forward(x_t, t, condition, pose)


def regression_loss(provider: TrainableScoreNet, x_t, t, condition, pose, target) -> torch.Tensor:
    """Mean squared error between the provider output and its target."""
    return ((provider(x_t, t, condition, pose) - target) ** 2).mean()


def lora_regression_step(provider, x_t, t, condition, pose, target, lr: float) -> float:
    """One SGD step on the noise-regression objective; returns the pre-step loss."""
    if not getattr(provider, "trainable", False):
        raise ProviderError(f"{type(provider).__name__} is not trainable")
    x_t = torch.as_tensor(x_t, dtype=DTYPE).detach()
    target = torch.as_tensor(target, dtype=DTYPE).detach()
    params = [p for p in provider.parameters() if p.requires_grad]
    with torch.enable_grad():
        loss = regression_loss(provider, x_t, t, condition, pose, target)
        grads = torch.autograd.grad(loss, params)
    with torch.no_grad():
        for p, g in zip(params, grads):
            if not torch.isfinite(g).all():
                raise ProviderError("non-finite gradient in score-net regression")
            p -= lr * g
    return float(loss.detach())


# --- external providers over a framed byte stream --------------------------


def write_frame(f: BinaryIO, payload: bytes) -> None:
    f.write(struct.pack("<I", len(payload)))
    f.write(payload)
    f.flush()


def read_frame(f: BinaryIO) -> bytes | None:
    head = f.read(4)
    if not head:
        return None
    if len(head) != 4:
        raise ProviderError("truncated frame header")
    (n,) = struct.unpack("<I", head)
    payload = f.read(n)
    if len(payload) != n:
        raise ProviderError(f"truncated frame: wanted {n} bytes, got {len(payload)}")
    return payload


def encode_request(x_t: np.ndarray, t: float, condition_id: int) -> bytes:
    H, W, C = x_t.shape
    head = SCORE_MAGIC + struct.pack("<IIIfI", W, H, C, float(t), int(condition_id))
    return head + np.ascontiguousarray(x_t, dtype="<f4").tobytes()


def decode_request(payload: bytes):
    if payload[:4] != SCORE_MAGIC:
        raise ProviderError(f"bad request magic {payload[:4]!r}")
    W, H, C, t, cond = struct.unpack("<IIIfI", payload[4:24])
    body = payload[24:]
    if len(body) != 4 * W * H * C:
        raise ProviderError("request payload size does not match W*H*C")
    x = np.frombuffer(body, dtype="<f4").reshape(H, W, C)
    return x, t, cond


class ExternalScoreProvider(ScoreProvider):
    """Talks to a noise predictor in another process via length-prefixed frames.

    Pass either a command (spawned with pipes) or an explicit reader/writer
    pair, e.g. from ``socket.makefile``.
    """

    kind = ProviderKind.EXTERNAL

    def __init__(self, command=None, reader=None, writer=None, parameterization=Parameterization.EPSILON):
        self.parameterization = Parameterization(parameterization)
        self._proc = None
        if command is not None:
            self._proc = subprocess.Popen(command, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
            reader, writer = self._proc.stdout, self._proc.stdin
        if reader is None or writer is None:
            raise ProviderError("external provider needs a command or a reader/writer pair")
        self._r, self._w = reader, writer

    def predict(self, x_t, t, condition=0, pose=None):
        x = x_t.detach().numpy() if torch.is_tensor(x_t) else np.asarray(x_t)
        write_frame(self._w, encode_request(x, t, condition))
        payload = read_frame(self._r)
        if payload is None:
            raise ProviderError("external provider closed the stream")
        if len(payload) != 4 * x.size:
            raise ProviderError(f"response has {len(payload) // 4} values, expected {x.size}")
        out = np.frombuffer(payload, dtype="<f4").reshape(x.shape).astype(np.float64)
        return torch.as_tensor(out)

    def close(self):
        if self._proc is not None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(provider: ScoreProvider, reader: BinaryIO, writer: BinaryIO) -> int:
    """Answer framed requests with ``provider`` until EOF; returns the count."""
    n = 0
    while True:
        payload = read_frame(reader)
        if payload is None:
            return n
        x, t, cond = decode_request(payload)
        out = provider.predict(torch.as_tensor(x.astype(np.float64)), int(round(t)), cond, None)
        write_frame(writer, np.ascontiguousarray(out.detach().numpy(), dtype="<f4").tobytes())
        n += 1


def main(argv=None) -> int:
    """``python -m geoprior.refine.providers MEAN VARIANCE``: serve an analytic
    Gaussian score (constant mean image) on stdin/stdout."""
    args = sys.argv[1:] if argv is None else argv
    mean = float(args[0]) if args else 0.5
    variance = float(args[1]) if len(args) > 1 else 0.0
    schedule = DiffusionSchedule.scaled_linear()

    class _Const(ScoreProvider):
        def predict(self, x_t, t, condition=0, pose=None):
            return analytic_gaussian_score(x_t, t, mean, variance, schedule)

    serve(_Const(), sys.stdin.buffer, sys.stdout.buffer)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
