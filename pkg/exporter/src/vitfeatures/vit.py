"""Frozen vision transformer with per-block patch-token taps.

One flexible module covers both supported backbones: the patch-14 model with
LayerScale and optional register tokens, and the classic patch-16 ImageNet
model. Layer indices are 1-based block outputs (the residual stream after
block i, before the final norm); class and register tokens are dropped from
every tap. Position embeddings are bicubically interpolated to the input's
patch grid, so non-native input sizes work as long as both sides are
multiples of the patch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class BackboneSpec:
    name: str
    patch_size: int
    embed_dim: int
    depth: int
    num_heads: int
    mlp_ratio: float
    layerscale: bool
    num_register_tokens: int
    pretrain_grid: int  # patch grid side the stored pos embed was trained at
    hub: tuple[str, str] | None  # (torch.hub repo, entry point)


SPECS = {
    "dinov2_vitb14": BackboneSpec(
        name="dinov2_vitb14", patch_size=14, embed_dim=768, depth=12,
        num_heads=12, mlp_ratio=4.0, layerscale=True, num_register_tokens=0,
        pretrain_grid=37, hub=("facebookresearch/dinov2", "dinov2_vitb14"),
    ),
    "vit_b16": BackboneSpec(
        name="vit_b16", patch_size=16, embed_dim=768, depth=12,
        num_heads=12, mlp_ratio=4.0, layerscale=False, num_register_tokens=0,
        pretrain_grid=14, hub=None,  # torchvision weights enum instead
    ),
}


class LayerScale(nn.Module):
    def __init__(self, dim, init=1e-5):
        super().__init__()
        self.gamma = nn.Parameter(init * torch.ones(dim))

    def forward(self, x):
        return x * self.gamma


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim, bias=True)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, d // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio, layerscale):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.ls1 = LayerScale(dim) if layerscale else nn.Identity()
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.ls2 = LayerScale(dim) if layerscale else nn.Identity()

    def forward(self, x):
        x = x + self.ls1(self.attn(self.norm1(x)))
        x = x + self.ls2(self.mlp(self.norm2(x)))
        return x


class PatchEmbed(nn.Module):
    def __init__(self, patch_size, embed_dim):
        super().__init__()
        self.proj = nn.Conv2d(3, embed_dim, kernel_size=patch_size,
                              stride=patch_size)

    def forward(self, x):
        return self.proj(x)


class PatchVit(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        d = spec.embed_dim
        self.patch_embed = PatchEmbed(spec.patch_size, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(
            torch.zeros(1, 1 + spec.pretrain_grid ** 2, d))
        if spec.num_register_tokens:
            self.register_tokens = nn.Parameter(
                torch.zeros(1, spec.num_register_tokens, d))
        self.blocks = nn.ModuleList(
            Block(d, spec.num_heads, spec.mlp_ratio, spec.layerscale)
            for _ in range(spec.depth))
        self.norm = nn.LayerNorm(d, eps=1e-6)

    def init_random(self, seed: int) -> None:
        """Deterministic random weights for geometry/format contract runs."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                if p.dim() > 1:
                    nn.init.trunc_normal_(p, std=0.02, generator=gen)
                else:
                    p.zero_()
            for block in self.blocks:
                if isinstance(block.ls1, LayerScale):
                    block.ls1.gamma.fill_(1e-5)
                    block.ls2.gamma.fill_(1e-5)

    def _pos_for_grid(self, gh, gw):
        cls_pos = self.pos_embed[:, :1]
        patch_pos = self.pos_embed[:, 1:]
        g0 = self.spec.pretrain_grid
        if (gh, gw) == (g0, g0):
            return cls_pos, patch_pos
        d = patch_pos.shape[-1]
        grid = patch_pos.reshape(1, g0, g0, d).permute(0, 3, 1, 2)
        grid = F.interpolate(grid, size=(gh, gw), mode="bicubic",
                             align_corners=False)
        return cls_pos, grid.permute(0, 2, 3, 1).reshape(1, gh * gw, d)

    def forward_features(self, x: torch.Tensor, layers) -> dict:
        """Run the frozen encoder; return {layer_index: (B, gh, gw, D)} taps.

        ``layers`` are 1-based block indices; class/register tokens dropped.
        """
        depth = self.spec.depth
        for layer in layers:
            if not 1 <= layer <= depth:
                raise ValueError(
                    f"layer index {layer} out of range for a {depth}-block backbone")
        b, _, h, w = x.shape
        p = self.spec.patch_size
        if h % p or w % p:
            raise ValueError(f"input {h}x{w} not a multiple of patch size {p}")
        gh, gw = h // p, w // p

        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)  # (B, N, D)
        cls_pos, patch_pos = self._pos_for_grid(gh, gw)
        parts = [self.cls_token.expand(b, -1, -1) + cls_pos,
                 tokens + patch_pos]
        n_special = 1
        if self.spec.num_register_tokens:
            parts.insert(1, self.register_tokens.expand(b, -1, -1))
            n_special += self.spec.num_register_tokens
        z = torch.cat(parts, dim=1)

        wanted = set(layers)
        taps = {}
        for i, block in enumerate(self.blocks, start=1):
            z = block(z)
            if i in wanted:
                d = z.shape[-1]
                taps[i] = z[:, n_special:, :].reshape(b, gh, gw, d)
        return taps


# --- weight loading ------------------------------------------------------------


_DINOV2_IGNORED = ("mask_token",)


def load_dinov2_state(model: PatchVit, state: dict) -> None:
    """Load a patch-14 checkpoint whose keys already match this module layout
    (patch_embed.proj, cls_token, pos_embed, blocks.i.{norm1,attn.qkv,...})."""
    state = {k: v for k, v in state.items() if not k.startswith(_DINOV2_IGNORED)}
    if "register_tokens" in state and not hasattr(model, "register_tokens"):
        raise ValueError(
            "checkpoint has register tokens; rebuild the backbone with "
            "num_register_tokens set to match")
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise ValueError(f"state dict mismatch: missing {sorted(missing)}, "
                         f"unexpected {sorted(unexpected)}")


def map_torchvision_vit_state(state: dict, depth: int = 12) -> dict:
    """Translate torchvision VisionTransformer keys to this module's layout."""
    out = {
        "cls_token": state["class_token"],
        "pos_embed": state["encoder.pos_embedding"],
        "patch_embed.proj.weight": state["conv_proj.weight"],
        "patch_embed.proj.bias": state["conv_proj.bias"],
        "norm.weight": state["encoder.ln.weight"],
        "norm.bias": state["encoder.ln.bias"],
    }
    for i in range(depth):
        src = f"encoder.layers.encoder_layer_{i}"
        dst = f"blocks.{i}"
        out[f"{dst}.norm1.weight"] = state[f"{src}.ln_1.weight"]
        out[f"{dst}.norm1.bias"] = state[f"{src}.ln_1.bias"]
        out[f"{dst}.attn.qkv.weight"] = state[f"{src}.self_attention.in_proj_weight"]
        out[f"{dst}.attn.qkv.bias"] = state[f"{src}.self_attention.in_proj_bias"]
        out[f"{dst}.attn.proj.weight"] = state[f"{src}.self_attention.out_proj.weight"]
        out[f"{dst}.attn.proj.bias"] = state[f"{src}.self_attention.out_proj.bias"]
        out[f"{dst}.norm2.weight"] = state[f"{src}.ln_2.weight"]
        out[f"{dst}.norm2.bias"] = state[f"{src}.ln_2.bias"]
        # torchvision's MLPBlock is a Sequential: 0 = fc1, 3 = fc2
        fc1 = f"{src}.mlp.0" if f"{src}.mlp.0.weight" in state else f"{src}.mlp.linear_1"
        fc2 = f"{src}.mlp.3" if f"{src}.mlp.3.weight" in state else f"{src}.mlp.linear_2"
        out[f"{dst}.mlp.fc1.weight"] = state[f"{fc1}.weight"]
        out[f"{dst}.mlp.fc1.bias"] = state[f"{fc1}.bias"]
        out[f"{dst}.mlp.fc2.weight"] = state[f"{fc2}.weight"]
        out[f"{dst}.mlp.fc2.bias"] = state[f"{fc2}.bias"]
    return out


def build_backbone(name: str, weights: str | None = None,
                   random_weights: bool = False, seed: int = 0,
                   num_register_tokens: int | None = None) -> PatchVit:
    """Construct a frozen backbone.

    weights: local checkpoint path (state dict). Without it, torch.hub (or
    torchvision for vit_b16) is tried, which needs network access; pass
    random_weights=True for deterministic random init instead (format and
    geometry contracts only - anomaly scores from random features are
    meaningless).
    """
    if name not in SPECS:
        raise ValueError(f"unknown backbone '{name}' (have {sorted(SPECS)})")
    spec = SPECS[name]
    if num_register_tokens is not None:
        spec = BackboneSpec(**{**spec.__dict__,
                               "num_register_tokens": num_register_tokens})
    model = PatchVit(spec)

    if random_weights:
        model.init_random(seed)
    elif weights:
        state = torch.load(weights, map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "model" in state:
            state = state["model"]
        if name == "vit_b16":
            state = map_torchvision_vit_state(state, spec.depth)
        load_dinov2_state(model, state)
    else:
        if name == "vit_b16":
            import torchvision
            ref = torchvision.models.vit_b_16(
                weights=torchvision.models.ViT_B_16_Weights.IMAGENET1K_V1)
            state = map_torchvision_vit_state(ref.state_dict(), spec.depth)
            load_dinov2_state(model, state)
        else:
            hub_repo, hub_entry = spec.hub
            ref = torch.hub.load(hub_repo, hub_entry)
            load_dinov2_state(model, ref.state_dict())

    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
