"""CLIP-style ResNet-50 vision tower and text transformer, in torch.

The vision tower follows the modified-ResNet layout of contrastive
vision-language models: a 3-conv stem with average-pool downsampling,
four bottleneck stages whose outputs have 256/512/1024/2048 channels at
strides 4/8/16/32, and an attention-pooling head that yields a 1024-d
global embedding. The text tower is a pre-norm transformer over 77 token
slots whose final hidden states are projected to the shared 1024-d space.

Without downloadable pretrained weights, `build_model` initializes
deterministically from a seed; a state-dict checkpoint can be loaded on
top when one is available.
"""

from __future__ import annotations

import hashlib

import torch
from torch import nn

EMBED_DIM = 1024
STAGE_CHANNELS = (256, 512, 1024, 2048)
TEXT_WIDTH = 512
TEXT_LAYERS = 4
TEXT_HEADS = 8
CONTEXT_LEN = 77
VOCAB_SIZE = 8192


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, inplanes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(inplanes, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        # anti-aliased downsampling: stride lives in an avgpool, not the conv
        self.avgpool = nn.AvgPool2d(stride) if stride > 1 else nn.Identity()
        self.conv3 = nn.Conv2d(planes, planes * self.expansion, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(planes * self.expansion)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = None
        if stride > 1 or inplanes != planes * self.expansion:
            self.downsample = nn.Sequential(
                nn.AvgPool2d(stride) if stride > 1 else nn.Identity(),
                nn.Conv2d(inplanes, planes * self.expansion, 1, bias=False),
                nn.BatchNorm2d(planes * self.expansion),
            )

    def forward(self, x):
        identity = x
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.avgpool(out)
        out = self.bn3(self.conv3(out))
        if self.downsample is not None:
            identity = self.downsample(x)
        return self.relu(out + identity)


class AttentionPool2d(nn.Module):
    """Global attention pooling: the mean token queries all spatial tokens."""

    def __init__(self, spacial_dim, embed_dim, num_heads, output_dim):
        super().__init__()
        self.positional_embedding = nn.Parameter(
            torch.randn(spacial_dim * spacial_dim + 1, embed_dim) / embed_dim**0.5
        )
        self.attn = nn.MultiheadAttention(embed_dim, num_heads, batch_first=False)
        self.proj = nn.Linear(embed_dim, output_dim)

    def forward(self, x):
        b, c, h, w = x.shape
        x = x.flatten(2).permute(2, 0, 1)                       # (HW, B, C)
        x = torch.cat([x.mean(0, keepdim=True), x], dim=0)      # prepend the query token
        pos = self.positional_embedding
        if pos.shape[0] != x.shape[0]:                          # tolerate other input sizes
            pos = nn.functional.interpolate(
                pos[1:].T[None], size=x.shape[0] - 1, mode="linear", align_corners=False
            )[0].T
            pos = torch.cat([self.positional_embedding[:1], pos], dim=0)
        x = x + pos[:, None, :]
        out, _ = self.attn(x[:1], x, x, need_weights=False)
        return self.proj(out[0])


class VisionTower(nn.Module):
    def __init__(self, layers=(3, 4, 6, 3), width=64, patch_res=224, heads=32):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, width // 2, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(width // 2),
            nn.ReLU(inplace=True),
            nn.Conv2d(width // 2, width // 2, 3, padding=1, bias=False),
            nn.BatchNorm2d(width // 2),
            nn.ReLU(inplace=True),
            nn.Conv2d(width // 2, width, 3, padding=1, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
            nn.AvgPool2d(2),
        )
        self._inplanes = width
        self.layer1 = self._stage(width, layers[0], stride=1)
        self.layer2 = self._stage(width * 2, layers[1], stride=2)
        self.layer3 = self._stage(width * 4, layers[2], stride=2)
        self.layer4 = self._stage(width * 8, layers[3], stride=2)
        self.attnpool = AttentionPool2d(patch_res // 32, width * 32, heads, EMBED_DIM)

    def _stage(self, planes, blocks, stride):
        layers = [Bottleneck(self._inplanes, planes, stride)]
        self._inplanes = planes * Bottleneck.expansion
        for _ in range(blocks - 1):
            layers.append(Bottleneck(self._inplanes, planes))
        return nn.Sequential(*layers)

    def forward(self, x):
        """Returns (global (B, 1024), [stage2, stage3, stage4] feature maps)."""
        x = self.stem(x)
        x = self.layer1(x)
        s2 = self.layer2(x)        # (B, 512,  P/8,  P/8)
        s3 = self.layer3(s2)       # (B, 1024, P/16, P/16)
        s4 = self.layer4(s3)       # (B, 2048, P/32, P/32)
        return self.attnpool(s4), [s2, s3, s4]


class TextTower(nn.Module):
    def __init__(self):
        super().__init__()
        self.token_embedding = nn.Embedding(VOCAB_SIZE, TEXT_WIDTH)
        self.positional_embedding = nn.Parameter(torch.empty(CONTEXT_LEN, TEXT_WIDTH))
        nn.init.normal_(self.positional_embedding, std=0.01)
        layer = nn.TransformerEncoderLayer(
            d_model=TEXT_WIDTH,
            nhead=TEXT_HEADS,
            dim_feedforward=4 * TEXT_WIDTH,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.transformer = nn.TransformerEncoder(
            layer, num_layers=TEXT_LAYERS, enable_nested_tensor=False
        )
        self.ln_final = nn.LayerNorm(TEXT_WIDTH)
        self.text_projection = nn.Parameter(torch.empty(TEXT_WIDTH, EMBED_DIM))
        nn.init.normal_(self.text_projection, std=TEXT_WIDTH**-0.5)

    def forward(self, tokens, eot_index):
        """tokens (B, 77) int64 -> (global (B, 1024), per-token (B, 77, 1024))."""
        x = self.token_embedding(tokens) + self.positional_embedding
        x = self.ln_final(self.transformer(x))
        per_token = x @ self.text_projection
        pooled = per_token[torch.arange(len(tokens)), eot_index]
        return pooled, per_token


BOS, EOS, PAD = 1, 2, 0


def tokenize(text: str) -> tuple[torch.Tensor, int]:
    """Hash-bucket word tokenizer into the fixed 77-slot context.

    Returns the token id row and the end-of-text index used for pooling.
    """
    words = [w for w in "".join(c if c.isalnum() else " " for c in text.lower()).split() if w]
    if not words:
        raise ValueError("text description is empty")
    ids = [BOS]
    for w in words[: CONTEXT_LEN - 2]:
        digest = hashlib.sha256(w.encode()).digest()
        ids.append(3 + int.from_bytes(digest[:4], "little") % (VOCAB_SIZE - 3))
    ids.append(EOS)
    eot = len(ids) - 1
    ids += [PAD] * (CONTEXT_LEN - len(ids))
    return torch.tensor([ids], dtype=torch.long), eot


class ClipStyleModel(nn.Module):
    def __init__(self, patch_res=224):
        super().__init__()
        self.visual = VisionTower(patch_res=patch_res)
        self.text = TextTower()


def build_model(patch_res: int, seed: int = 0, weights_path=None) -> ClipStyleModel:
    """Deterministically initialized model, optionally overlaid with a checkpoint."""
    torch.manual_seed(seed)
    model = ClipStyleModel(patch_res=patch_res)
    if weights_path is not None:
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    model.eval()
    return model
