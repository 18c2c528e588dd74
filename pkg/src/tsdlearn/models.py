"""Model definitions.

Three networks cooperate:

* ConditionalNet embeds a clean reference clip of the target class into a
  fixed vector (trained as a classifier over source classes, embedding taken
  from the penultimate layer and L2-normalized).
* StudentModel is a CRNN detector conditioned on that embedding. The same
  architecture serves both students; the weak student additionally pools
  frame probabilities into a clip probability with linear-softmax pooling.
* DomainDiscriminator predicts source vs target domain from the student's
  convolutional feature map; a gradient reversal layer between the two turns
  the domain loss into an alignment pressure on the features.
"""

from __future__ import annotations

import os

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .features import MelSpectrogram

EMBEDDING_DIM = 128
KD_DIM = 64
MIN_FRAMES = 8


def init_layer(layer):
    """Initialize a linear or convolutional layer."""
    nn.init.xavier_uniform_(layer.weight)
    if hasattr(layer, "bias") and layer.bias is not None:
        layer.bias.data.fill_(0.0)


def init_bn(bn):
    """Initialize a batch normalization layer."""
    bn.bias.data.fill_(0.0)
    bn.weight.data.fill_(1.0)


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------

def linsoft_pool(frame_probs: torch.Tensor) -> torch.Tensor:
    """Linear-softmax pooling of frame probabilities into a clip probability.

    clip = sum(p^2) / sum(p), defined as 0 when all frames are 0. Frames
    with larger probability get proportionally larger weight, so the pooled
    value sits between mean and max.

    Args:
      frame_probs: (time,) or (batch, time), values in [0, 1]

    Returns:
      scalar or (batch,) clip probability
    """
    p = frame_probs
    s1 = p.sum(dim=-1)
    s2 = (p * p).sum(dim=-1)
    safe = torch.clamp(s1, min=torch.finfo(p.dtype).tiny)
    return torch.where(s1 > 0, s2 / safe, torch.zeros_like(s1))


# ---------------------------------------------------------------------------
# Gradient reversal
# ---------------------------------------------------------------------------

class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.lam * grad_output, None


def grad_reverse(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    """Identity in the forward pass, gradient scaled by -lam in the backward
    pass. Placing this between features and a domain classifier makes the
    feature extractor ascend the domain loss that the classifier descends."""
    return _GradReverse.apply(x, lam)


# ---------------------------------------------------------------------------
# Conditional network
# ---------------------------------------------------------------------------

class ConditionalNet(nn.Module):
    """Reference clip encoder.

    Input: (batch, time, mel). A small convolutional stack pools the clip to
    one vector; a fully-connected layer maps it to the embedding, and a second
    fully-connected layer with softmax classifies the clip during training.
    """

    def __init__(self, n_classes: int, n_mels: int = 64,
                 embedding_dim: int = EMBEDDING_DIM):
        super().__init__()
        self._init_kwargs = {"n_classes": n_classes, "n_mels": n_mels,
                             "embedding_dim": embedding_dim}
        self.n_classes = n_classes
        self.embedding_dim = embedding_dim

        self.bn0 = nn.BatchNorm2d(n_mels)
        channels = [1, 16, 32, 64]
        self.convs = nn.ModuleList()
        self.bns = nn.ModuleList()
        for cin, cout in zip(channels[:-1], channels[1:]):
            self.convs.append(nn.Conv2d(cin, cout, kernel_size=3, padding=1))
            self.bns.append(nn.BatchNorm2d(cout))
        self.fc_embed = nn.Linear(channels[-1], embedding_dim)
        self.fc_class = nn.Linear(embedding_dim, n_classes)
        self.init_weights()

    def init_weights(self):
        init_bn(self.bn0)
        for conv, bn in zip(self.convs, self.bns):
            init_layer(conv)
            init_bn(bn)
        init_layer(self.fc_embed)
        init_layer(self.fc_class)

    def forward(self, x: torch.Tensor) -> dict:
        """Args: x (batch, time, mel). Returns dict with 'embedding'
        (batch, embedding_dim, L2-normalized) and 'logits' (batch, classes)."""
        x = x.unsqueeze(1)                      # (B, 1, T, F)
        x = x.transpose(1, 3)                   # (B, F, T, 1)
        x = self.bn0(x)
        x = x.transpose(1, 3)
        for conv, bn in zip(self.convs, self.bns):
            x = F.relu_(bn(conv(x)))
            x = F.avg_pool2d(x, kernel_size=2, ceil_mode=True)
        x = torch.mean(x, dim=3)                # (B, C, T')
        x = torch.mean(x, dim=2) + torch.amax(x, dim=2)
        h = F.relu_(self.fc_embed(x))
        embedding = F.normalize(h, dim=-1)
        logits = self.fc_class(h)
        return {"embedding": embedding, "logits": logits}


# ---------------------------------------------------------------------------
# Student detector
# ---------------------------------------------------------------------------

class StudentModel(nn.Module):
    """Conditional CRNN sound event detector.

    Five convolutional layers pool the mel axis down while keeping the time
    axis intact, the reference embedding is concatenated to every frame, a
    bidirectional GRU yields the frame feature map, and two fully-connected
    layers map each frame to a detection probability. `pooling` selects the
    clip head: 'none' for the strongly-supervised student, 'linsoft' for the
    weakly-supervised one.
    """

    def __init__(self, pooling: str = "none", n_mels: int = 64,
                 embedding_dim: int = EMBEDDING_DIM, gru_hidden: int = 64,
                 kd_dim: int = KD_DIM):
        super().__init__()
        if pooling not in ("none", "linsoft"):
            raise ValueError(f"unknown pooling {pooling!r}")
        self._init_kwargs = {"pooling": pooling, "n_mels": n_mels,
                             "embedding_dim": embedding_dim,
                             "gru_hidden": gru_hidden, "kd_dim": kd_dim}
        self.pooling = pooling
        self.embedding_dim = embedding_dim
        self.feature_dim = 2 * gru_hidden
        self.kd_dim = kd_dim

        self.bn0 = nn.BatchNorm2d(n_mels)
        channels = [1, 16, 32, 64, 64, 64]
        self.convs = nn.ModuleList()
        self.bns = nn.ModuleList()
        for cin, cout in zip(channels[:-1], channels[1:]):
            self.convs.append(nn.Conv2d(cin, cout, kernel_size=3, padding=1))
            self.bns.append(nn.BatchNorm2d(cout))
        self.conv_out_dim = channels[-1] * (n_mels // 2 ** (len(channels) - 1))

        self.gru = nn.GRU(self.conv_out_dim + embedding_dim, gru_hidden,
                          batch_first=True, bidirectional=True)
        self.fc1 = nn.Linear(self.feature_dim, 64)
        self.fc2 = nn.Linear(64, 1)
        # projection of the frame feature map into the shared distillation space
        self.kd_proj = nn.Linear(self.feature_dim, kd_dim, bias=False)
        self.init_weights()

    def init_weights(self):
        init_bn(self.bn0)
        for conv, bn in zip(self.convs, self.bns):
            init_layer(conv)
            init_bn(bn)
        init_layer(self.fc1)
        init_layer(self.fc2)
        init_layer(self.kd_proj)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Convolutional feature map, (batch, channels, time, mel')."""
        if x.shape[1] < MIN_FRAMES:
            raise ValueError(
                f"input has {x.shape[1]} frames, need at least {MIN_FRAMES}")
        x = x.unsqueeze(1)
        x = x.transpose(1, 3)
        x = self.bn0(x)
        x = x.transpose(1, 3)
        for conv, bn in zip(self.convs, self.bns):
            x = F.relu_(bn(conv(x)))
            x = F.avg_pool2d(x, kernel_size=(1, 2))
        return x

    def head(self, conv_map: torch.Tensor,
             embedding: torch.Tensor) -> dict:
        """Recurrent and per-frame layers on top of a convolutional map.

        Args:
          conv_map: (batch, channels, time, mel')
          embedding: reference embedding (batch, embedding_dim)

        Returns dict with 'frame_probs' (batch, time), 'feature_map'
        (batch, time, feature_dim), 'kd_embed' (batch, time, kd_dim) and,
        for the linsoft head, 'clip_prob'.
        """
        if embedding.shape[-1] != self.embedding_dim:
            raise ValueError(
                f"embedding dim {embedding.shape[-1]} != {self.embedding_dim}")
        b, c, t, f = conv_map.shape
        frames = conv_map.permute(0, 2, 1, 3).reshape(b, t, c * f)
        cond = embedding.unsqueeze(1).expand(-1, t, -1)
        feature_map, _ = self.gru(torch.cat([frames, cond], dim=-1))
        hidden = F.relu_(self.fc1(feature_map))
        frame_probs = torch.sigmoid(self.fc2(hidden)).squeeze(-1)

        out = {
            "frame_probs": frame_probs,
            "feature_map": feature_map,
            "kd_embed": self.kd_proj(feature_map),
        }
        if self.pooling == "linsoft":
            out["clip_prob"] = linsoft_pool(frame_probs)
        return out

    def forward(self, x: torch.Tensor, embedding: torch.Tensor,
                grl_lambda: float | None = None) -> dict:
        """Args:
          x: mixture features (batch, time, mel)
          embedding: reference embedding (batch, embedding_dim)
          grl_lambda: if set, also return the gradient-reversed conv map

        Returns the `head` dict plus 'conv_map' and, when grl_lambda is
        set, 'reversed_map'.
        """
        conv_map = self.encode(x)
        out = self.head(conv_map, embedding)
        out["conv_map"] = conv_map
        if grl_lambda is not None:
            out["reversed_map"] = grad_reverse(conv_map, grl_lambda)
        return out


# ---------------------------------------------------------------------------
# Domain discriminator
# ---------------------------------------------------------------------------

class DomainDiscriminator(nn.Module):
    """Domain classifier over a student's convolutional feature map.

    Three convolutional layers and one fully-connected layer; the output is
    a softmax distribution over (source, target).
    """

    def __init__(self, in_channels: int = 64):
        super().__init__()
        self._init_kwargs = {"in_channels": in_channels}
        channels = [in_channels, 32, 16, 8]
        self.convs = nn.ModuleList()
        self.bns = nn.ModuleList()
        for cin, cout in zip(channels[:-1], channels[1:]):
            self.convs.append(nn.Conv2d(cin, cout, kernel_size=3, padding=1))
            self.bns.append(nn.BatchNorm2d(cout))
        self.fc = nn.Linear(channels[-1], 2)
        self.init_weights()

    def init_weights(self):
        for conv, bn in zip(self.convs, self.bns):
            init_layer(conv)
            init_bn(bn)
        init_layer(self.fc)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """Args: z (batch, channels, time, mel'). Returns (batch, 2) domain
        probabilities summing to 1."""
        x = z
        for conv, bn in zip(self.convs, self.bns):
            x = F.relu_(bn(conv(x)))
        x = torch.mean(x, dim=(2, 3))
        return torch.softmax(self.fc(x), dim=-1)


# ---------------------------------------------------------------------------
# Inference helpers
# ---------------------------------------------------------------------------

def _as_batch(mel: MelSpectrogram | np.ndarray | torch.Tensor,
              dtype, device) -> torch.Tensor:
    if isinstance(mel, MelSpectrogram):
        mel = mel.values
    x = torch.as_tensor(np.asarray(mel), dtype=dtype, device=device)
    if x.ndim == 2:
        x = x.unsqueeze(0)
    return x


def conditional_embed(model: ConditionalNet,
                      reference: MelSpectrogram | np.ndarray) -> np.ndarray:
    """Embed one reference clip, returning a unit-norm (embedding_dim,) vector."""
    param = next(model.parameters())
    x = _as_batch(reference, param.dtype, param.device)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(x)
    model.train(was_training)
    return out["embedding"][0].cpu().numpy()


def detect_frames(model: StudentModel, mixture: MelSpectrogram | np.ndarray,
                  embedding: np.ndarray | torch.Tensor) -> np.ndarray:
    """Frame-level detection probabilities for one mixture, shape (time,)."""
    param = next(model.parameters())
    x = _as_batch(mixture, param.dtype, param.device)
    e = torch.as_tensor(np.asarray(embedding), dtype=param.dtype,
                        device=param.device)
    if e.ndim == 1:
        e = e.unsqueeze(0)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(x, e)
    model.train(was_training)
    return out["frame_probs"][0].cpu().numpy()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1
_MODEL_KINDS = {
    "student": StudentModel,
    "conditional": ConditionalNet,
    "discriminator": DomainDiscriminator,
}


def save_checkpoint(model: nn.Module, path: str | os.PathLike,
                    extra: dict | None = None) -> None:
    kind = next((k for k, cls in _MODEL_KINDS.items()
                 if type(model) is cls), None)
    if kind is None:
        raise ValueError(f"cannot checkpoint model of type {type(model).__name__}")
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "kwargs": model._init_kwargs,
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    os.makedirs(os.path.dirname(os.path.abspath(os.fspath(path))), exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[nn.Module, dict]:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version {version!r} unsupported "
            f"(expected {CHECKPOINT_VERSION}): {path}")
    cls = _MODEL_KINDS[payload["kind"]]
    model = cls(**payload["kwargs"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload["extra"]
