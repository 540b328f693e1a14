"""A small vision transformer whose attention matrices are instrumented.

Every block exposes its head-averaged, post-softmax attention matrix as a
retained node on the tape, so the gradient of any class score with respect to
that matrix can be read back after a single reverse pass.  The averaged
matrix is what the value mixing consumes, which makes it a genuine interior
node of the graph rather than a spectator: differentiating the averaged map
is the implemented semantics (averaging per-head gradients instead would in
general give different numbers).

The classifier is a linear layer on the final [class] token.  A per-token
linear head plus bilinear upsampling stands in for a full segmentation
decoder.  Two auxiliary GAP classifiers (features with the [class] token
added to every location, or ignored) support conventional CAM extraction for
baseline comparisons; they are fitted separately on frozen features.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import gtt
from .autodiff import Tensor


@dataclass
class ModelConfig:
    """Architecture hyperparameters; ``n`` patch tokens are derived."""

    image_size: int = 32
    patch_size: int = 8
    d: int = 16
    L: int = 3
    heads: int = 2
    C: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.d % self.heads:
            raise ValueError(f"embed dim {self.d} not divisible by heads {self.heads}")
        if self.L < 1:
            raise ValueError("need at least one block")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n(self) -> int:
        return self.grid * self.grid


@dataclass
class AttentionTap:
    """Per-block capture of the head-averaged attention and its class gradient."""

    block_index: int
    A: Tensor
    grad_A: Tensor | None = None
    class_id: int | None = None


@dataclass
class TokenFeatures:
    """Final token matrix with the [class] row split out.

    ``F`` anchors the final block's *input* tokens: the classifier reads only
    the [class] row of the output, so output patch rows get structurally zero
    gradient, while every row of ``F`` still reaches the class score through
    the last attention block.  The token-space baseline differentiates at
    this anchor.
    """

    O: Tensor
    O_cls: Tensor
    O_patch: Tensor
    F: Tensor | None = None
    grad_F: np.ndarray | None = None
    grad_class_id: int | None = None


@dataclass
class Prediction:
    """Classification logits, one per foreground class."""

    logits: Tensor

    def y(self, c: int) -> Tensor:
        if not 0 <= c < self.logits.size:
            raise IndexError(f"class index {c} out of range 0..{self.logits.size - 1}")
        return ad.pick(self.logits, c)

    def values(self) -> np.ndarray:
        return self.logits.data.copy()


@lru_cache(maxsize=16)
def bilinear_matrix(grid: int, out_size: int) -> np.ndarray:
    """Dense [out*out, grid*grid] matrix performing bilinear upsampling.

    Source coordinates follow the half-pixel convention; rows sum to one, so
    constant grids map to constant images.  Upsampling then becomes a plain
    matrix product, which keeps it exactly differentiable.
    """
    scale = grid / out_size
    weights = np.zeros((out_size * out_size, grid * grid))
    coords = np.clip((np.arange(out_size) + 0.5) * scale - 0.5, 0.0, grid - 1.0)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, grid - 1)
    frac = coords - lo
    for y in range(out_size):
        for x in range(out_size):
            row = y * out_size + x
            for gy, wy in ((lo[y], 1 - frac[y]), (hi[y], frac[y])):
                for gx, wx in ((lo[x], 1 - frac[x]), (hi[x], frac[x])):
                    weights[row, gy * grid + gx] += wy * wx
    return weights


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class VisionTransformer:
    """Pre-norm ViT with per-head projections and tap instrumentation."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        d, dh, H = cfg.d, cfg.d // cfg.heads, cfg.heads
        p = cfg.patch_size

        self.params: dict[str, Tensor] = {}

        def param(name, shape, zero=False):
            data = np.zeros(shape) if zero else _trunc_normal(rng, shape)
            t = Tensor(data, requires_grad=True)
            self.params[name] = t
            return t

        param("patch_w", (3 * p * p, d))
        param("patch_b", (d,), zero=True)
        param("cls_token", (1, d))
        param("pos_embed", (cfg.n + 1, d))
        for i in range(cfg.L):
            param(f"blk{i}_ln1_g", (d,), zero=True).data[:] = 1.0
            param(f"blk{i}_ln1_b", (d,), zero=True)
            for h in range(H):
                param(f"blk{i}_h{h}_wq", (d, dh))
                param(f"blk{i}_h{h}_bq", (dh,), zero=True)
                param(f"blk{i}_h{h}_wk", (d, dh))
                param(f"blk{i}_h{h}_bk", (dh,), zero=True)
                param(f"blk{i}_h{h}_wv", (d, dh))
                param(f"blk{i}_h{h}_bv", (dh,), zero=True)
                param(f"blk{i}_h{h}_wo", (dh, d))
            param(f"blk{i}_bo", (d,), zero=True)
            param(f"blk{i}_ln2_g", (d,), zero=True).data[:] = 1.0
            param(f"blk{i}_ln2_b", (d,), zero=True)
            param(f"blk{i}_mlp_w1", (d, 4 * d))
            param(f"blk{i}_mlp_b1", (4 * d,), zero=True)
            param(f"blk{i}_mlp_w2", (4 * d, d))
            param(f"blk{i}_mlp_b2", (d,), zero=True)
        param("final_ln_g", (d,), zero=True).data[:] = 1.0
        param("final_ln_b", (d,), zero=True)
        param("cls_head_w", (d, cfg.C))
        param("cls_head_b", (cfg.C,), zero=True)
        param("seg_head_w", (d, cfg.C + 1))
        param("seg_head_b", (cfg.C + 1,), zero=True)

        # Auxiliary GAP classifiers for CAM baselines; fitted separately and
        # excluded from the main optimizer.
        self.cam_heads: dict[str, dict[str, Tensor]] = {
            variant: {"w": Tensor(np.zeros((d, cfg.C)), requires_grad=True),
                      "b": Tensor(np.zeros(cfg.C), requires_grad=True)}
            for variant in ("add", "ignore")
        }

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name in self.params:
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {k: v.data.copy() for k, v in self.params.items()}
        for variant, head in self.cam_heads.items():
            state[f"cam_{variant}_w"] = head["w"].data.copy()
            state[f"cam_{variant}_b"] = head["b"].data.copy()
        return state

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            if k not in state:
                raise KeyError(f"checkpoint missing tensor {k!r}")
            if state[k].shape != t.data.shape:
                raise ValueError(f"tensor {k!r}: shape {state[k].shape} != {t.data.shape}")
            t.data[...] = state[k]
        for variant, head in self.cam_heads.items():
            for leg in ("w", "b"):
                key = f"cam_{variant}_{leg}"
                if key in state:
                    head[leg].data[...] = state[key]

    # -- forward ------------------------------------------------------------

    def patch_embed(self, image: Tensor) -> Tensor:
        """Tokenize: flatten patches, project, prepend [class] row, add positions.

        Pixel values in [0, 1] are first centered to [-1, 1]; without this the
        constant brightness component of every patch drowns the class signal
        at this scale.
        """
        cfg = self.cfg
        if image.shape != (3, cfg.image_size, cfg.image_size):
            raise ad.DimensionError(
                f"expected image of shape (3, {cfg.image_size}, {cfg.image_size}), "
                f"got {image.shape}")
        centered = ad.scale(ad.add(image, -0.5), 2.0)
        patches = ad.extract_patches(centered, cfg.patch_size)
        tok = ad.linear(patches, self.params["patch_w"], self.params["patch_b"])
        tok = ad.concat_rows(self.params["cls_token"], tok)
        return ad.add(tok, self.params["pos_embed"])

    def forward_with_taps(self, image: Tensor | np.ndarray,
                          attn_override: dict[int, np.ndarray] | None = None,
                          ) -> tuple[Prediction, TokenFeatures, list[AttentionTap]]:
        """Run all blocks, retaining each head-averaged attention matrix.

        ``attn_override`` substitutes a fixed value for a block's averaged
        attention (as a fresh leaf), holding the rest of the forward intact;
        this is the hook the finite-difference oracle perturbs.
        """
        cfg = self.cfg
        if not isinstance(image, Tensor):
            image = Tensor(image)
        P = self.params
        dh = cfg.d // cfg.heads
        inv_sqrt = 1.0 / math.sqrt(dh)

        tok = self.patch_embed(image)
        taps: list[AttentionTap] = []
        feat_anchor: Tensor | None = None
        for i in range(cfg.L):
            if i == cfg.L - 1:
                ad.retain(tok)
                feat_anchor = tok
            h_in = ad.layer_norm(tok, P[f"blk{i}_ln1_g"], P[f"blk{i}_ln1_b"])
            head_A = []
            values = []
            for h in range(cfg.heads):
                q = ad.linear(h_in, P[f"blk{i}_h{h}_wq"], P[f"blk{i}_h{h}_bq"])
                k = ad.linear(h_in, P[f"blk{i}_h{h}_wk"], P[f"blk{i}_h{h}_bk"])
                v = ad.linear(h_in, P[f"blk{i}_h{h}_wv"], P[f"blk{i}_h{h}_bv"])
                scores = ad.scale(ad.matmul(q, ad.transpose2d(k)), inv_sqrt)
                head_A.append(ad.softmax_rows(scores))
                values.append(v)
            avg = head_A[0]
            for extra in head_A[1:]:
                avg = ad.add(avg, extra)
            avg = ad.scale(avg, 1.0 / cfg.heads)
            if attn_override is not None and i in attn_override:
                override = Tensor(attn_override[i])
                avg.tape.adopt(override)  # keep it retainable on this tape
                avg = override
            ad.retain(avg)
            taps.append(AttentionTap(block_index=i, A=avg))

            attn_out = None
            for h in range(cfg.heads):
                mixed = ad.matmul(avg, values[h])
                proj = ad.matmul(mixed, P[f"blk{i}_h{h}_wo"])
                attn_out = proj if attn_out is None else ad.add(attn_out, proj)
            attn_out = ad.add_rowvec(attn_out, P[f"blk{i}_bo"])
            tok = ad.add(tok, attn_out)

            h2 = ad.layer_norm(tok, P[f"blk{i}_ln2_g"], P[f"blk{i}_ln2_b"])
            m = ad.linear(h2, P[f"blk{i}_mlp_w1"], P[f"blk{i}_mlp_b1"])
            m = ad.gelu(m)
            m = ad.linear(m, P[f"blk{i}_mlp_w2"], P[f"blk{i}_mlp_b2"])
            tok = ad.add(tok, m)

        O = ad.layer_norm(tok, P["final_ln_g"], P["final_ln_b"])
        O_cls = ad.slice_rows(O, 0, 1)
        O_patch = ad.slice_rows(O, 1, cfg.n + 1)
        logits = ad.reshape(
            ad.linear(O_cls, P["cls_head_w"], P["cls_head_b"]), (cfg.C,))
        return (Prediction(logits),
                TokenFeatures(O, O_cls, O_patch, F=feat_anchor), taps)

    def backprop_class_score(self, pred: Prediction, c: int,
                             taps: list[AttentionTap],
                             features: TokenFeatures | None = None) -> list[AttentionTap]:
        """Back-propagate the raw logit of class ``c`` and harvest tap gradients.

        Gradients are cleared before returning, so parameters keep empty
        gradient slots and successive calls for different classes are
        independent.  When ``features`` is given, the gradient of the final
        token matrix is stashed on it as well (for the token-space baseline).
        """
        root = pred.y(c)
        tape = root.tape
        ad.backward(root, tape)
        for tap in taps:
            tap.grad_A = Tensor(tap.A.grad.copy())
            tap.class_id = c
        if features is not None and features.F is not None:
            features.grad_F = features.F.grad.copy()
            features.grad_class_id = c
        tape.clear_gradients()
        return taps

    def segmentation_head(self, features: TokenFeatures) -> Tensor:
        """Per-token class logits, bilinearly upsampled to image resolution."""
        cfg = self.cfg
        seg_tok = ad.linear(features.O_patch, self.params["seg_head_w"],
                            self.params["seg_head_b"])
        up = ad.matmul(Tensor(bilinear_matrix(cfg.grid, cfg.image_size)), seg_tok)
        return ad.reshape(ad.transpose2d(up),
                          (cfg.C + 1, cfg.image_size, cfg.image_size))

    def cam_head_variants(self, features: TokenFeatures, variant: str) -> np.ndarray:
        """Conventional CAM from patch-token features under a GAP classifier.

        ``add`` folds the [class] token into every location first; ``ignore``
        drops it.  Scores are clamped at zero.  Returns [C, grid, grid].
        """
        if variant not in ("add", "ignore"):
            raise ValueError(f"unknown CAM variant {variant!r}")
        cfg = self.cfg
        feats = features.O_patch.data
        if variant == "add":
            feats = feats + features.O_cls.data
        cam = feats @ self.cam_heads[variant]["w"].data  # [n, C]
        cam = np.maximum(cam, 0.0)
        return cam.T.reshape(cfg.C, cfg.grid, cfg.grid).copy()

    def cam_logits(self, features: TokenFeatures, variant: str) -> np.ndarray:
        """GAP-classifier logits for a variant (used when fitting the heads)."""
        feats = features.O_patch.data
        if variant == "add":
            feats = feats + features.O_cls.data
        head = self.cam_heads[variant]
        return feats.mean(axis=0) @ head["w"].data + head["b"].data

    # -- persistence ----------------------------------------------------------

    def save_checkpoint(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, arr in self.state_arrays().items():
            gtt.write_tensor(directory / f"{name}.gtt", arr)
        cfg = self.cfg
        gtt.write_manifest(directory / "manifest.txt", {
            "image_size": cfg.image_size, "patch_size": cfg.patch_size,
            "d": cfg.d, "L": cfg.L, "heads": cfg.heads, "C": cfg.C,
            "seed": self.seed,
        })

    @classmethod
    def load_checkpoint(cls, directory: str | Path) -> "VisionTransformer":
        directory = Path(directory)
        manifest = gtt.read_manifest(directory / "manifest.txt")
        cfg = ModelConfig(
            image_size=int(manifest["image_size"]),
            patch_size=int(manifest["patch_size"]),
            d=int(manifest["d"]), L=int(manifest["L"]),
            heads=int(manifest["heads"]), C=int(manifest["C"]))
        model = cls(cfg, seed=int(manifest.get("seed", 0)))
        state = {}
        for path in sorted(directory.glob("*.gtt")):
            state[path.stem] = gtt.read_tensor(path)
        model.load_state_arrays(state)
        return model
