"""The style-transfer network: speech patch transformer, content and style encoders,
style-conditioned pose decoder, and the fader discriminator.

All modules run without dropout, so forward passes are deterministic in both
train and eval mode. Inputs are batched with padding masks so that a sample's
outputs never depend on the other samples in its batch.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .data import Sample
from .errors import AlignmentGap, ConfigError, DimensionMismatch, TooShort


@dataclass
class ModelConfig:
    d_model: int = 768
    d_text: int = 768
    n_mels: int = 128
    patch_size: int = 16
    patch_stride: int = 10
    max_mel_frames: int = 256
    speech_layers: int = 12
    speech_heads: int = 12
    content_att_heads: int = 4
    style_att_heads: int = 4
    pose_lstm_layers: int = 3
    decoder_layers: int = 1
    decoder_heads: int = 2
    ff_mult: int = 4
    J: int = 10
    T: int = 64

    @property
    def d_att(self) -> int:
        return self.d_model + self.d_text

    @property
    def d_style(self) -> int:
        return self.d_att + self.d_model

    @property
    def f_steps(self) -> int:
        return (self.n_mels - self.patch_size) // self.patch_stride + 1

    @property
    def max_patches(self) -> int:
        return self.f_steps * ((self.max_mel_frames - self.patch_size) // self.patch_stride + 1)

    def validate(self) -> "ModelConfig":
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ConfigError(f"{f.name} must be positive")
        if self.d_att % self.content_att_heads or self.d_att % self.style_att_heads:
            raise ConfigError(f"d_att={self.d_att} not divisible by attention head counts")
        if self.d_model % self.decoder_heads or self.d_model % self.speech_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by decoder/speech heads")
        if self.patch_size > self.n_mels or self.patch_size > self.max_mel_frames:
            raise ConfigError("patch_size exceeds mel dimensions")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------- patches

def patch_grid(n_frames: int, n_mels: int, patch_size: int, stride: int) -> tuple[int, int]:
    """(t_steps, f_steps) of the overlapping patch grid."""
    if n_frames < patch_size:
        raise TooShort(f"mel has {n_frames} frames, need >= {patch_size}")
    if n_mels < patch_size:
        raise TooShort(f"mel has {n_mels} bins, need >= {patch_size}")
    return (n_frames - patch_size) // stride + 1, (n_mels - patch_size) // stride + 1


def patchify(mel, patch_size: int = 16, patch_stride: int = 10):
    """Split a [T_w, n_mels] spectrogram into flattened patches, time-major.

    Patch ``t * f_steps + f`` is ``mel[t*stride : t*stride+size, f*stride : f*stride+size]``
    flattened row-major. Accepts numpy arrays or tensors with leading batch dims.
    """
    is_np = isinstance(mel, np.ndarray)
    x = torch.as_tensor(mel)
    t_steps, f_steps = patch_grid(x.shape[-2], x.shape[-1], patch_size, patch_stride)
    p = x.unfold(-2, patch_size, patch_stride).unfold(-2, patch_size, patch_stride)
    # [..., t_steps, f_steps, size(time), size(freq)]
    p = p.reshape(*x.shape[:-2], t_steps * f_steps, patch_size * patch_size)
    return p.numpy() if is_np else p


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    """Padded tensors for a list of samples.

    text [B, W, d_text], mel [B, W, F, n_mels], mel_len [B, W], word_mask [B, W]
    (True for real words), pose [B, T, 2J] or None, frame_word [B, T].
    """

    text: Tensor
    mel: Tensor
    mel_len: Tensor
    word_mask: Tensor
    frame_word: Tensor
    pose: Tensor | None
    speakers: list[str]

    @property
    def size(self) -> int:
        return self.text.shape[0]

    def to(self, dtype: torch.dtype) -> "Batch":
        return Batch(self.text.to(dtype), self.mel.to(dtype), self.mel_len, self.word_mask,
                     self.frame_word, None if self.pose is None else self.pose.to(dtype), self.speakers)


def frame_word_index(alignment: Sequence[tuple[int, int]], T: int) -> np.ndarray:
    idx = np.full(T, -1, dtype=np.int64)
    cursor = 0
    for w, (s, e) in enumerate(alignment):
        if s != cursor or e <= s:
            raise AlignmentGap(f"span {w} = [{s}, {e}) does not continue a partition")
        idx[s:e] = w
        cursor = e
    if cursor != T:
        raise AlignmentGap(f"spans cover {cursor} of {T} frames")
    return idx


def collate(samples: Sequence[Sample], with_pose: bool = True, dtype: torch.dtype = torch.float32) -> Batch:
    B = len(samples)
    W = max(s.W for s in samples)
    F = max(w.mel.shape[0] for s in samples for w in s.words)
    d_text = samples[0].words[0].text_vec.shape[0]
    n_mels = samples[0].words[0].mel.shape[1]
    T = samples[0].T
    text = np.zeros((B, W, d_text), np.float32)
    mel = np.zeros((B, W, F, n_mels), np.float32)
    mel_len = np.zeros((B, W), np.int64)
    mask = np.zeros((B, W), bool)
    frame_word = np.zeros((B, T), np.int64)
    for b, s in enumerate(samples):
        if s.T != T:
            raise DimensionMismatch("samples in a batch must share T")
        for w, word in enumerate(s.words):
            if word.text_vec.shape[0] != d_text or word.mel.shape[1] != n_mels:
                raise DimensionMismatch(f"sample {b} word {w}: feature dims differ within batch")
            text[b, w] = word.text_vec
            mel[b, w, : word.mel.shape[0]] = word.mel
            mel_len[b, w] = word.mel.shape[0]
            mask[b, w] = True
        frame_word[b] = frame_word_index(s.alignment, T)
    pose = torch.as_tensor(np.stack([s.pose for s in samples]), dtype=dtype) if with_pose else None
    return Batch(torch.as_tensor(text, dtype=dtype), torch.as_tensor(mel, dtype=dtype),
                 torch.as_tensor(mel_len), torch.as_tensor(mask), torch.as_tensor(frame_word),
                 pose, [s.speaker_id for s in samples])


# ---------------------------------------------------------------- blocks

def reset_parameters(module: nn.Module) -> None:
    """Uniform(+-1/sqrt(fan_in)) for matrices, orthogonal recurrent kernels, zero biases."""
    for name, p in module.named_parameters(recurse=False):
        with torch.no_grad():
            if name in ("cls", "start", "pos"):
                p.normal_(0.0, 0.02)
            elif "bias" in name:
                p.zero_()
            elif isinstance(module, nn.LayerNorm):
                p.fill_(1.0)
            elif name.startswith("weight_hh"):
                for chunk in p.split(p.shape[1], dim=0):
                    nn.init.orthogonal_(chunk)
            else:
                bound = 1.0 / math.sqrt(p.shape[-1])
                p.uniform_(-bound, bound)


class SelfAttentionBlock(nn.Module):
    """Multi-head self-attention with residual connection and post layer norm."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, dropout=0.0, batch_first=True)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: Tensor, pad_mask: Tensor | None = None) -> Tensor:
        out, _ = self.attn(x, x, x, key_padding_mask=pad_mask, need_weights=False)
        return self.norm(x + out)


class SpeechEncoder(nn.Module):
    """Patch transformer over a word's mel segment; returns the CLS output row."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Linear(cfg.patch_size * cfg.patch_size, cfg.d_model)
        self.cls = nn.Parameter(torch.zeros(1, 1, cfg.d_model))
        self.pos = nn.Parameter(torch.zeros(1, cfg.max_patches + 1, cfg.d_model))
        layer = nn.TransformerEncoderLayer(cfg.d_model, cfg.speech_heads, cfg.ff_mult * cfg.d_model,
                                           dropout=0.0, activation="gelu", batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, cfg.speech_layers, enable_nested_tensor=False)

    def forward(self, mel: Tensor, mel_len: Tensor) -> Tensor:
        """mel [N, F, n_mels] zero-padded, mel_len [N] -> [N, d_model]."""
        cfg = self.cfg
        if mel.shape[-1] != cfg.n_mels:
            raise DimensionMismatch(f"mel has {mel.shape[-1]} bins, model expects {cfg.n_mels}")
        if mel.shape[1] > cfg.max_mel_frames:
            raise DimensionMismatch(f"mel segment of {mel.shape[1]} frames exceeds max_mel_frames")
        if int(mel_len.min()) < cfg.patch_size:
            raise TooShort(f"mel segment shorter than patch size {cfg.patch_size}")
        patches = patchify(mel, cfg.patch_size, cfg.patch_stride)  # [N, P, size^2]
        n_valid = ((mel_len - cfg.patch_size) // cfg.patch_stride + 1) * cfg.f_steps
        P = patches.shape[1]
        x = self.proj(patches)
        x = torch.cat([self.cls.expand(x.shape[0], -1, -1), x], dim=1) + self.pos[:, : P + 1]
        pad = torch.arange(P + 1, device=x.device)[None, :] > n_valid[:, None]
        return self.encoder(x, src_key_padding_mask=pad)[:, 0]


class PoseEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.lstm = nn.LSTM(2 * cfg.J, cfg.d_model, cfg.pose_lstm_layers, batch_first=True)

    def forward(self, pose: Tensor) -> Tensor:
        _, (h, _) = self.lstm(pose)
        return h[-1]


def masked_mean(x: Tensor, mask: Tensor) -> Tensor:
    """Mean over dim 1 of [B, W, D] restricted to mask [B, W]."""
    m = mask.to(x.dtype).unsqueeze(-1)
    return (x * m).sum(1) / m.sum(1)


class ContentEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.speech = SpeechEncoder(cfg)
        self.attn = SelfAttentionBlock(cfg.d_att, cfg.content_att_heads)

    def forward(self, batch: Batch) -> Tensor:
        """-> h_content [B, W, d_att]; padded word rows are zeroed."""
        speech = encode_words(self.speech, batch)
        x = torch.cat([speech, batch.text], dim=-1)
        h = self.attn(x, pad_mask=~batch.word_mask)
        return h * batch.word_mask.unsqueeze(-1).to(h.dtype)


class StyleEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.speech = SpeechEncoder(cfg)
        self.attn = SelfAttentionBlock(cfg.d_att, cfg.style_att_heads)
        self.pose = PoseEncoder(cfg)

    def forward(self, batch: Batch) -> Tensor:
        """-> h_style [B, d_att + d_model]."""
        if batch.pose is None:
            raise DimensionMismatch("style encoding needs pose")
        speech = encode_words(self.speech, batch)
        x = torch.cat([batch.text, speech], dim=-1)
        multimodal = masked_mean(self.attn(x, pad_mask=~batch.word_mask), batch.word_mask)
        return torch.cat([multimodal, self.pose(batch.pose)], dim=-1)


def encode_words(encoder: SpeechEncoder, batch: Batch) -> Tensor:
    """Run the speech encoder over every real word; -> [B, W, d_model] with zero padding."""
    B, W = batch.word_mask.shape
    flat_mask = batch.word_mask.reshape(-1)
    mel = batch.mel.reshape(B * W, *batch.mel.shape[2:])[flat_mask]
    out = encoder(mel, batch.mel_len.reshape(-1)[flat_mask])
    full = out.new_zeros(B * W, out.shape[-1])
    full = full.index_copy(0, flat_mask.nonzero().squeeze(-1), out)
    return full.reshape(B, W, -1)


def upsample_content(h_content: Tensor, frame_word: Tensor) -> Tensor:
    """Repeat word rows over their frame spans: [B, W, D], [B, T] -> [B, T, D]."""
    if int(frame_word.min()) < 0 or int(frame_word.max()) >= h_content.shape[1]:
        raise AlignmentGap("frame alignment refers to a missing word")
    idx = frame_word.unsqueeze(-1).expand(-1, -1, h_content.shape[-1])
    return torch.gather(h_content, 1, idx)


def causal_mask(n: int, device=None) -> Tensor:
    return torch.triu(torch.ones(n, n, dtype=torch.bool, device=device), diagonal=1)


class Generator(nn.Module):
    """Transformer decoder over frame-rate content+style memory with teacher forcing."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.dense = nn.Linear(cfg.d_att + cfg.d_style, cfg.d_model)
        self.pose_in = nn.Linear(2 * cfg.J, cfg.d_model)
        self.start = nn.Parameter(torch.zeros(1, 1, cfg.d_model))
        self.pos = nn.Parameter(torch.zeros(1, cfg.T, cfg.d_model))
        layer = nn.TransformerDecoderLayer(cfg.d_model, cfg.decoder_heads, cfg.ff_mult * cfg.d_model,
                                           dropout=0.0, activation="gelu", batch_first=True)
        self.decoder = nn.TransformerDecoder(layer, cfg.decoder_layers)
        self.head = nn.Linear(cfg.d_model, 2 * cfg.J)

    def memory(self, h_content: Tensor, h_style: Tensor, frame_word: Tensor) -> Tensor:
        frames = upsample_content(h_content, frame_word)
        style = h_style.unsqueeze(1).expand(-1, frames.shape[1], -1)
        mem = self.dense(torch.cat([frames, style], dim=-1))
        if mem.shape[1] > self.cfg.T:
            raise DimensionMismatch(f"T={mem.shape[1]} exceeds configured T={self.cfg.T}")
        return mem + self.pos[:, : mem.shape[1]]

    def decode(self, memory: Tensor, prev_pose: Tensor) -> Tensor:
        """prev_pose [B, n, 2J] are the already-known frames 0..n-1 -> predictions for frames 0..n."""
        B, n = prev_pose.shape[:2]
        tgt = torch.cat([self.start.expand(B, -1, -1), self.pose_in(prev_pose)], dim=1)
        tgt = tgt + self.pos[:, : n + 1]
        mask = causal_mask(n + 1, tgt.device)
        return self.head(self.decoder(tgt, memory, tgt_mask=mask, tgt_is_causal=True))

    def forward(self, h_content: Tensor, h_style: Tensor, frame_word: Tensor,
                target_pose: Tensor | None = None) -> Tensor:
        mem = self.memory(h_content, h_style, frame_word)
        T = mem.shape[1]
        if target_pose is not None:
            if target_pose.shape[1:] != (T, 2 * self.cfg.J):
                raise DimensionMismatch(f"target pose {tuple(target_pose.shape)} vs T={T}, J={self.cfg.J}")
            return self.decode(mem, target_pose[:, :-1])
        out = mem.new_zeros(mem.shape[0], 0, 2 * self.cfg.J)
        for _ in range(T):
            step = self.decode(mem, out)[:, -1:]
            out = torch.cat([out, step], dim=1)
        return out


class Discriminator(nn.Module):
    """Predicts h_style from word-pooled h_content."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(cfg.d_att, cfg.d_model), nn.GELU(),
            nn.Linear(cfg.d_model, cfg.d_model), nn.GELU(),
            nn.Linear(cfg.d_model, cfg.d_style),
        )

    def forward(self, h_content: Tensor, word_mask: Tensor | None = None) -> Tensor:
        if word_mask is None:
            word_mask = torch.ones(h_content.shape[:2], dtype=torch.bool, device=h_content.device)
        return self.net(masked_mean(h_content, word_mask))


class ZSMSTM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.validate()
        self.content_encoder = ContentEncoder(cfg)
        self.style_encoder = StyleEncoder(cfg)
        self.generator = Generator(cfg)
        self.discriminator = Discriminator(cfg)
        self.apply(reset_parameters)

    def generator_parameters(self) -> list[nn.Parameter]:
        """Everything except the discriminator: both encoders and G."""
        return [p for name, p in self.named_parameters() if not name.startswith("discriminator.")]

    def discriminator_parameters(self) -> list[nn.Parameter]:
        return list(self.discriminator.parameters())

    def encode_content(self, batch: Batch) -> Tensor:
        return self.content_encoder(batch)

    def encode_style(self, batch: Batch) -> Tensor:
        return self.style_encoder(batch)

    def discriminate(self, h_content: Tensor, word_mask: Tensor | None = None) -> Tensor:
        return self.discriminator(h_content, word_mask)

    def generate(self, h_content: Tensor, h_style: Tensor, frame_word: Tensor,
                 target_pose: Tensor | None = None) -> Tensor:
        return self.generator(h_content, h_style, frame_word, target_pose)

    def forward(self, batch: Batch, teacher_forcing: bool = True):
        """Full pipeline; returns (pred_pose, h_content, h_style)."""
        h_content = self.encode_content(batch)
        h_style = self.encode_style(batch)
        pred = self.generate(h_content, h_style, batch.frame_word,
                             batch.pose if teacher_forcing else None)
        return pred, h_content, h_style


def speech_encode(encoder: SpeechEncoder, mel) -> Tensor:
    """Encode one [T_w, n_mels] segment -> [d_model]."""
    x = torch.as_tensor(np.asarray(mel) if not isinstance(mel, Tensor) else mel)
    x = x.to(next(encoder.parameters()).dtype)
    return encoder(x.unsqueeze(0), torch.tensor([x.shape[0]]))[0]


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
