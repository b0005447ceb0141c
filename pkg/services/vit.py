"""
Tiny Vision Transformer with a class token and a style token.

Token layout is `[class, style, patch_1 .. patch_NP]`. Each attention head owns
its W_Q, W_K, W_V and its row slice W_O of the block output projection, so a
head is a self-contained parameter group that can be trained or frozen on its
own.
"""

import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Tuple, Union

import numpy as np

from errors import ShapeError
from models import ViTConfig
from services import autodiff as ad
from services.autodiff import Tensor

logger = logging.getLogger(__name__)

CLASS_INDEX = 0
STYLE_INDEX = 1
NUM_SPECIAL_TOKENS = 2

HEAD_WEIGHTS = ("w_q", "w_k", "w_v", "w_o")


def image_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[B, C, H, W] -> [B, N_P, C*p*p], patches in row-major grid order."""
    batch, channels, height, width = images.shape
    rows, cols = height // patch_size, width // patch_size
    grid = images.reshape(batch, channels, rows, patch_size, cols, patch_size)
    grid = grid.transpose(0, 2, 4, 1, 3, 5)
    return grid.reshape(batch, rows * cols, channels * patch_size * patch_size)


def assemble_patches(patches: np.ndarray, channels: int, image_size: int, patch_size: int) -> np.ndarray:
    """Inverse of `image_patches`."""
    batch = patches.shape[0]
    side = image_size // patch_size
    grid = patches.reshape(batch, side, side, channels, patch_size, patch_size)
    grid = grid.transpose(0, 3, 1, 4, 2, 5)
    return grid.reshape(batch, channels, image_size, image_size)


def head_attention(tokens: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Tensor:
    """Softmax(q k^T / sqrt(d_k)) v for one head over all tokens."""
    q = tokens @ w_q
    k = tokens @ w_k
    v = tokens @ w_v
    scale = 1.0 / np.sqrt(w_q.shape[-1])
    weights = ad.softmax_rows(ad.mul(q @ ad.transpose(k), scale))
    return weights @ v


@dataclass
class ForwardOutput:
    z_c: Tensor
    z_n: Tensor
    goal_logits: Tensor
    style_logits: Tensor


@dataclass
class ParamGroups:
    non_causal: Dict[str, Tensor]
    causal: Dict[str, Tensor]
    goal: Dict[str, Tensor]
    style: Dict[str, Tensor]

    def as_list(self) -> List[Dict[str, Tensor]]:
        return [self.non_causal, self.causal, self.goal, self.style]

    def task_params(self) -> Dict[str, Tensor]:
        return {**self.causal, **self.goal}

    def style_params(self) -> Dict[str, Tensor]:
        return {**self.non_causal, **self.style}


class ViTModel:
    def __init__(self, config: ViTConfig, seed: int = 0):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(seed)
        self.params: Dict[str, Tensor] = {}
        self._build(rng)

    @property
    def num_tokens(self) -> int:
        return self.config.num_patches + NUM_SPECIAL_TOKENS

    def _add(self, name: str, array: np.ndarray) -> None:
        self.params[name] = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=True, name=name)

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        d, d_k, std = cfg.embed_dim, cfg.head_dim, cfg.init_std
        hidden = cfg.mlp_ratio * d

        def normal(*shape):
            return rng.normal(0.0, std, size=shape)

        self._add("patch_embed.weight", normal(cfg.patch_dim, d))
        self._add("patch_embed.bias", np.zeros(d))
        self._add("pos_embed", normal(self.num_tokens, d))
        self._add("cls_token", normal(d))
        self._add("style_token", normal(d))
        for block in range(cfg.num_blocks):
            prefix = f"blocks.{block}"
            self._add(f"{prefix}.ln1.gain", np.ones(d))
            self._add(f"{prefix}.ln1.bias", np.zeros(d))
            for head in range(cfg.heads_per_block):
                for weight in ("w_q", "w_k", "w_v"):
                    self._add(f"{prefix}.heads.{head}.{weight}", normal(d, d_k))
                self._add(f"{prefix}.heads.{head}.w_o", normal(d_k, d))
            self._add(f"{prefix}.proj.bias", np.zeros(d))
            self._add(f"{prefix}.ln2.gain", np.ones(d))
            self._add(f"{prefix}.ln2.bias", np.zeros(d))
            self._add(f"{prefix}.mlp.fc1.weight", normal(d, hidden))
            self._add(f"{prefix}.mlp.fc1.bias", np.zeros(hidden))
            self._add(f"{prefix}.mlp.fc2.weight", normal(hidden, d))
            self._add(f"{prefix}.mlp.fc2.bias", np.zeros(d))
        self._add("goal_head.weight", normal(d, cfg.num_classes))
        self._add("goal_head.bias", np.zeros(cfg.num_classes))
        self._add("style_head.weight", normal(cfg.style_hidden, cfg.num_styles))
        self._add("style_head.bias", np.zeros(cfg.num_styles))
        self._add("style_head.norm.gain", np.ones(d))
        self._add("style_head.norm.bias", np.zeros(d))
        self._add("style_head.fc1.weight", rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, cfg.style_hidden)))
        self._add("style_head.fc1.bias", np.zeros(cfg.style_hidden))

    def head_params(self, block: int, head: int) -> Dict[str, Tensor]:
        prefix = f"blocks.{block}.heads.{head}"
        return {f"{prefix}.{w}": self.params[f"{prefix}.{w}"] for w in HEAD_WEIGHTS}

    def _check_images(self, images: np.ndarray) -> np.ndarray:
        cfg = self.config
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        expected = (cfg.channels, cfg.image_size, cfg.image_size)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ShapeError(f"expected images of shape [B, {expected}], got {images.shape}")
        return images.astype(self.dtype, copy=False)

    def patchify_embed(self, images: np.ndarray) -> Tensor:
        """Images [B, C, H, W] (or one [C, H, W]) -> tokens [B, N_P + 2, d]."""
        images = self._check_images(images)
        batch = images.shape[0]
        p = self.params
        patches = Tensor(image_patches(images, self.config.patch_size))
        patch_tokens = patches @ p["patch_embed.weight"] + p["patch_embed.bias"]
        d = self.config.embed_dim
        cls = ad.expand(ad.reshape(p["cls_token"], (1, d)), batch)
        sty = ad.expand(ad.reshape(p["style_token"], (1, d)), batch)
        tokens = ad.concat([cls, sty, patch_tokens], axis=1)
        return tokens + p["pos_embed"]

    def head_outputs(self, normed: Tensor, block: int) -> List[Tensor]:
        prefix = f"blocks.{block}.heads"
        p = self.params
        return [
            head_attention(normed, p[f"{prefix}.{h}.w_q"], p[f"{prefix}.{h}.w_k"], p[f"{prefix}.{h}.w_v"])
            for h in range(self.config.heads_per_block)
        ]

    def pre_norm(self, tokens: Tensor, block: int) -> Tensor:
        p = self.params
        return ad.layer_norm(tokens, p[f"blocks.{block}.ln1.gain"], p[f"blocks.{block}.ln1.bias"])

    def finish_block(self, tokens: Tensor, heads: List[Tensor], block: int) -> Tensor:
        """Projects concatenated head outputs, adds the residual, then the MLP branch."""
        p = self.params
        prefix = f"blocks.{block}"
        attended = p[f"{prefix}.proj.bias"]
        for h, out in enumerate(heads):
            attended = attended + out @ p[f"{prefix}.heads.{h}.w_o"]
        tokens = tokens + attended
        normed = ad.layer_norm(tokens, p[f"{prefix}.ln2.gain"], p[f"{prefix}.ln2.bias"])
        hidden = ad.gelu(normed @ p[f"{prefix}.mlp.fc1.weight"] + p[f"{prefix}.mlp.fc1.bias"])
        return tokens + (hidden @ p[f"{prefix}.mlp.fc2.weight"] + p[f"{prefix}.mlp.fc2.bias"])

    def block_forward(self, tokens: Tensor, block: int) -> Tensor:
        return self.finish_block(tokens, self.head_outputs(self.pre_norm(tokens, block), block), block)

    def style_classifier(self, z_n: Tensor) -> Tensor:
        """f_n: layer norm, one GELU hidden layer, then the style logits."""
        p = self.params
        normed = ad.layer_norm(z_n, p["style_head.norm.gain"], p["style_head.norm.bias"])
        hidden = ad.gelu(normed @ p["style_head.fc1.weight"] + p["style_head.fc1.bias"])
        return hidden @ p["style_head.weight"] + p["style_head.bias"]

    def readout(self, tokens: Tensor) -> ForwardOutput:
        p = self.params
        z_c = ad.take(tokens, CLASS_INDEX, axis=-2)
        z_n = ad.take(tokens, STYLE_INDEX, axis=-2)
        goal = z_c @ p["goal_head.weight"] + p["goal_head.bias"]
        style = self.style_classifier(z_n)
        return ForwardOutput(z_c=z_c, z_n=z_n, goal_logits=goal, style_logits=style)

    def forward(self, images: np.ndarray) -> ForwardOutput:
        single = np.asarray(images).ndim == 3
        tokens = self.patchify_embed(images)
        for block in range(self.config.num_blocks):
            tokens = self.block_forward(tokens, block)
        out = self.readout(tokens)
        if single:
            out = ForwardOutput(*(ad.take(t, 0, axis=0) for t in (out.z_c, out.z_n, out.goal_logits, out.style_logits)))
        return out

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    @contextmanager
    def trainable(self, names: Iterable[str]) -> Iterator["ViTModel"]:
        """Only the named parameters participate in the tape inside this block."""
        names = set(names)
        previous = {name: p.requires_grad for name, p in self.params.items()}
        for name, p in self.params.items():
            p.requires_grad = name in names
        try:
            yield self
        finally:
            for name, p in self.params.items():
                p.requires_grad = previous[name]

    def frozen(self):
        return self.trainable(())

    def infer(self, images: np.ndarray, batch_size: int = 128) -> Dict[str, np.ndarray]:
        """Batched inference without a tape; returns z_c, z_n, goal and style logits."""
        chunks: Dict[str, List[np.ndarray]] = {"z_c": [], "z_n": [], "goal_logits": [], "style_logits": []}
        with ad.no_grad():
            for start in range(0, len(images), batch_size):
                out = self.forward(np.asarray(images[start : start + batch_size]))
                for key in chunks:
                    chunks[key].append(getattr(out, key).data)
        return {key: np.concatenate(parts) for key, parts in chunks.items()}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        """With `strict=False` only the shared, same-shaped entries are copied."""
        if not strict:
            state = {k: v for k, v in state.items() if k in self.params and v.shape == self.params[k].shape}
            for name, value in state.items():
                self.params[name].data = np.asarray(value, dtype=self.dtype).copy()
                self.params[name].grad = None
            return
        missing = set(self.params) - set(state)
        unexpected = set(state) - set(self.params)
        if missing or unexpected:
            raise ShapeError(f"state mismatch: missing={sorted(missing)[:3]} unexpected={sorted(unexpected)[:3]}")
        for name, p in self.params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {state[name].shape}")
            p.data = np.asarray(state[name], dtype=self.dtype).copy()
            p.grad = None

    def clone(self) -> "ViTModel":
        twin = ViTModel.__new__(ViTModel)
        twin.config = self.config
        twin.dtype = self.dtype
        twin.params = {
            name: Tensor(p.data.copy(), requires_grad=True, name=name) for name, p in self.params.items()
        }
        return twin


def parameter_owner(name: str) -> Tuple[str, Optional[Tuple[int, int]]]:
    """Maps a parameter name to ('head', (block, head)) | ('backbone' | 'goal' | 'style', None)."""
    parts = name.split(".")
    if parts[0] == "goal_head":
        return "goal", None
    if parts[0] == "style_head":
        return "style", None
    if parts[0] == "blocks" and parts[2] == "heads":
        return "head", (int(parts[1]), int(parts[3]))
    return "backbone", None


def partition_params(model: ViTModel, mask: Optional[np.ndarray]) -> ParamGroups:
    cfg = model.config
    if mask is None:
        mask = np.zeros((cfg.num_blocks, cfg.heads_per_block), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (cfg.num_blocks, cfg.heads_per_block):
        raise ShapeError(f"head mask shape {mask.shape} does not match {(cfg.num_blocks, cfg.heads_per_block)}")
    groups = ParamGroups(non_causal={}, causal={}, goal={}, style={})
    for name, p in model.params.items():
        owner, head = parameter_owner(name)
        if owner == "head":
            target = groups.non_causal if mask[head] else groups.causal
        elif owner == "goal":
            target = groups.goal
        elif owner == "style":
            target = groups.style
        else:
            target = groups.causal
        target[name] = p
    return groups


def save_model(path: Union[str, Path], model: ViTModel, mask: Optional[np.ndarray] = None) -> None:
    """Writes `<path>` (checkpoint) and `<path>.manifest.json` (ViTConfig + head mask)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ad.save_checkpoint(path, model.params)
    manifest = {
        "format": "csft-model",
        "vit": model.config.model_dump(),
        "head_mask": None if mask is None else np.asarray(mask, dtype=bool).tolist(),
    }
    Path(f"{path}.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_model(path: Union[str, Path], dtype: Optional[str] = None) -> Tuple[ViTModel, Optional[np.ndarray]]:
    path = Path(path)
    manifest = json.loads(Path(f"{path}.manifest.json").read_text())
    vit = ViTConfig(**manifest["vit"])
    if dtype:
        vit = vit.model_copy(update={"dtype": dtype})
    model = ViTModel(vit)
    model.load_state_dict(ad.load_checkpoint(path))
    mask = manifest.get("head_mask")
    return model, None if mask is None else np.asarray(mask, dtype=bool)
