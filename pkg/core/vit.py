"""ViT encoder exposing per-block class tokens, final patch tokens and attention.

Blocks are pre-norm (LN -> MHSA -> residual -> LN -> MLP(GELU) -> residual).
Three L2-constrained heads read the final-norm class token, the loss-tap class
token and every final patch token.
"""
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from einops import rearrange
from einops.layers.torch import Rearrange

from core.config import ModelConfig
from core.errors import InvalidArgumentError
from core.imagecore import ColorSpace, ImageTensor, normalize_per_channel

INIT_STD = 0.02
PATCH_PATTERN = "(h p1) (w p2) c -> (h w) (p1 p2 c)"


def torch_dtype(name):
    return torch.float64 if name == "float64" else torch.float32


def patchify(img, patch_size):
    """Raster-order flattened patches, shape (G², patch_size² * 3)."""
    data = img.data if isinstance(img, ImageTensor) else np.asarray(img)
    h, w = data.shape[:2]
    if h % patch_size or w % patch_size:
        raise InvalidArgumentError(f"patch size {patch_size} does not divide image {h}x{w}")
    return rearrange(data, PATCH_PATTERN, p1=patch_size, p2=patch_size)


def unpatchify(patches, grid_h, grid_w, patch_size):
    return rearrange(np.asarray(patches), "(h w) (p1 p2 c) -> (h p1) (w p2) c",
                     h=grid_h, w=grid_w, p1=patch_size, p2=patch_size)


def l2_rescale(features, alpha):
    """Rescale feature vectors to L2 norm alpha; zero vectors pass through flagged."""
    sq = (features * features).sum(dim=-1, keepdim=True)
    tiny = torch.finfo(features.dtype).tiny
    degenerate = sq <= tiny
    norm = torch.sqrt(sq.clamp_min(tiny))
    scaled = torch.where(degenerate, features, alpha * features / norm)
    return scaled, degenerate.squeeze(-1)


class ConstrainedHead(nn.Module):
    """Linear classifier over alpha-rescaled features."""

    def __init__(self, dim, n_classes, alpha, **factory):
        super().__init__()
        self.alpha = alpha
        self.fc = nn.Linear(dim, n_classes, **factory)

    def forward(self, features):
        scaled, degenerate = l2_rescale(features, self.alpha)
        return self.fc(scaled), degenerate


class Attention(nn.Module):
    def __init__(self, dim, heads, **factory):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, **factory)
        self.proj = nn.Linear(dim, dim, **factory)

    def forward(self, x):
        q, k, v = (rearrange(t, "b n (h d) -> b h n d", h=self.heads)
                   for t in self.qkv(x).chunk(3, dim=-1))
        attn = torch.softmax(torch.matmul(q, k.transpose(-1, -2)) * self.scale, dim=-1)
        out = rearrange(torch.matmul(attn, v), "b h n d -> b n (h d)")
        return self.proj(out), attn


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio, eps, **factory):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim, eps=eps, **factory)
        self.attn = Attention(dim, heads, **factory)
        self.norm2 = nn.LayerNorm(dim, eps=eps, **factory)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden, **factory),
            nn.GELU(),
            nn.Linear(hidden, dim, **factory),
        )

    def forward(self, x):
        attn_out, attn = self.attn(self.norm1(x))
        mid = x + attn_out
        out = mid + self.mlp(self.norm2(mid))
        return mid, out, attn


@dataclass
class EncoderActivations:
    class_tokens: torch.Tensor
    class_tokens_mid: torch.Tensor
    patch_tokens_final: torch.Tensor
    attention_final: torch.Tensor
    logits_final: torch.Tensor
    logits_tap: torch.Tensor
    logits_patch: torch.Tensor
    degenerate: dict

    def class_token(self, tap):
        """(B, dim) class token at a tap point."""
        return select_class_token(self.class_tokens, self.class_tokens_mid, tap)


class FasViT(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        factory = {"dtype": torch_dtype(config.dtype)}
        dim = config.embed_dim
        patch_dim = config.patch_size ** 2 * 3
        self.to_patches = Rearrange("b (h p1) (w p2) c -> b (h w) (p1 p2 c)",
                                    p1=config.patch_size, p2=config.patch_size)
        self.patch_embed = nn.Linear(patch_dim, dim, **factory)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim, **factory))
        self.pos_embed = nn.Parameter(torch.zeros(1, config.n_patches + 1, dim, **factory))
        self.blocks = nn.ModuleList(
            Block(dim, config.heads, config.mlp_ratio, config.ln_eps, **factory)
            for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(dim, eps=config.ln_eps, **factory)
        self.head_final = ConstrainedHead(dim, config.n_classes, config.alpha, **factory)
        self.head_tap = ConstrainedHead(dim, config.n_classes, config.alpha, **factory)
        self.head_patch = ConstrainedHead(dim, config.n_classes, config.alpha, **factory)
        self._init_parameters()

    @staticmethod
    def _init_module(module):
        if isinstance(module, nn.Linear):
            nn.init.trunc_normal_(module.weight, mean=0.0, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
            nn.init.zeros_(module.bias)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)

    def _init_parameters(self):
        self.apply(self._init_module)
        for param in (self.cls_token, self.pos_embed):
            nn.init.trunc_normal_(param, mean=0.0, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)

    @property
    def dtype(self):
        return self.patch_embed.weight.dtype

    def forward(self, images):
        cfg = self.config
        if images.ndim != 4 or tuple(images.shape[1:]) != (cfg.image_size, cfg.image_size, 3):
            raise InvalidArgumentError(
                f"expected images of shape (B, {cfg.image_size}, {cfg.image_size}, 3), got {tuple(images.shape)}")
        x = self.patch_embed(self.to_patches(images.to(self.dtype)))
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos_embed
        cls_mid, cls_out = [], []
        attn = None
        for block in self.blocks:
            mid, x, attn = block(x)
            cls_mid.append(mid[:, 0])
            cls_out.append(x[:, 0])
        x = self.norm(x)
        cls_out.append(x[:, 0])
        class_tokens = torch.stack(cls_out, dim=1)
        patch_tokens = x[:, 1:]

        class_tokens_mid = torch.stack(cls_mid, dim=1)
        tap_token = select_class_token(class_tokens, class_tokens_mid, cfg.loss_tap_point)
        logits_final, deg_final = self.head_final(class_tokens[:, -1])
        logits_tap, deg_tap = self.head_tap(tap_token)
        logits_patch, deg_patch = self.head_patch(patch_tokens)
        return EncoderActivations(
            class_tokens=class_tokens,
            class_tokens_mid=class_tokens_mid,
            patch_tokens_final=patch_tokens,
            attention_final=attn,
            logits_final=logits_final,
            logits_tap=logits_tap,
            logits_patch=logits_patch,
            degenerate={"final": deg_final, "tap": deg_tap, "patch": deg_patch},
        )


def select_class_token(class_tokens, class_tokens_mid, tap):
    if tap.is_final:
        return class_tokens[:, -1]
    if tap.stage == "attn":
        return class_tokens_mid[:, tap.block - 1]
    return class_tokens[:, tap.block - 1]


def build_model(config, seed=0):
    """Fresh model with truncated-normal weights; identical for identical seeds."""
    if not isinstance(config, ModelConfig):
        raise InvalidArgumentError("build_model expects a ModelConfig")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
        model = FasViT(config)
    return model


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def images_to_tensor(images, dtype=torch.float64):
    """Stack NORMALIZED ImageTensors into a (B, H, W, 3) tensor."""
    if isinstance(images, ImageTensor):
        images = [images]
    arrays = []
    for img in images:
        if img.color_space != ColorSpace.NORMALIZED:
            raise InvalidArgumentError("model input must be a normalized image")
        arrays.append(img.data)
    return torch.from_numpy(np.stack(arrays)).to(dtype)


def normalize_images(images, eval_config):
    """SRGB_UNIT images -> NORMALIZED images using per-image or dataset statistics."""
    if eval_config.normalization == "dataset":
        return [normalize_per_channel(img, eval_config.dataset_mean, eval_config.dataset_std) for img in images]
    return [normalize_per_channel(img) for img in images]


def forward(model, images):
    """Forward one or more normalized images."""
    return model(images_to_tensor(images, model.dtype))


def attention_class_weights(acts):
    """(B, G²) weights: class-token row of the final attention, head-averaged, renormalized."""
    row = acts.attention_final[:, :, 0, 1:].mean(dim=1)
    return row / row.sum(dim=-1, keepdim=True)

