"""SplitCaps detection head on a small convolutional backbone.

Data flow for a batch of images ``[B, 3, H, W]``::

    backbone -> features [B, c_i*a_i, h, w] -> child capsules [B, c_i, a_i, h, w]
      -> object projections  [B, c_i, 1, a_obj, h, w]   (deformable or fixed)
      -> class projections   [B, c_i, 1, K, h, w]
      -> per-location routing coefficients r [B, h, w, c_i]
      -> v_obj [B, a_obj, h, w], heatmap = sigmoid(v_cls + bias) [B, K, h, w]
    features -> offset head, size head -> [B, 2, h, w] each

The reconstruction subnet maps a 64-d v_obj vector to a 28x28 mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .capsules import LayerConfig, conv_capsule_project, deform_capsule_project, init_offsets, init_projection_kernel
from .numerics import ParameterRegistry, ShapeError, Tensor, as_tensor, make_rng
from .routing import ExcitationWeights, excitation_width, excite, route, squeeze, uniform_coefficients

ABLATIONS = ("deform", "non_deform", "no_routing")


@dataclass
class HeadConfig:
    image_size: int = 64
    d: int = 4
    c_i: int = 8
    a_i: int = 8
    k: int = 3
    a_obj: int = 64
    K: int = 3
    t: int = 4
    recon_side: int = 28
    recon_width: int = 256
    box_width: int = 256
    backbone_widths: tuple[int, int] = (32, 64)
    ablation: str = "deform"
    literal_variance: bool = False
    heatmap_prior: float = 0.1

    def __post_init__(self):
        self.backbone_widths = tuple(int(v) for v in self.backbone_widths)
        self.ablation = self.ablation.replace("-", "_")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.d != 4:
            raise ValueError("the reference backbone has two stride-2 stages, so d must be 4")
        if self.image_size % self.d:
            raise ValueError(f"image size {self.image_size} not divisible by d={self.d}")
        excitation_width(self.c_i, self.t)

    @property
    def deformable(self) -> bool:
        return self.ablation != "non_deform"

    @property
    def channels(self) -> int:
        return self.c_i * self.a_i

    @property
    def grid(self) -> int:
        return self.image_size // self.d

    @property
    def recon_pixels(self) -> int:
        return self.recon_side ** 2

    def layer(self, a_j: int) -> LayerConfig:
        return LayerConfig(c_i=self.c_i, a_i=self.a_i, c_j=1, a_j=a_j, k=self.k, H=self.grid, W=self.grid)


@dataclass
class HeadOutput:
    heatmap_pred: Tensor  # [B, K, h, w]
    v_obj_grid: Tensor  # [B, a_obj, h, w]
    offsets_pred: Tensor  # [B, 2, h, w]
    sizes_pred: Tensor  # [B, 2, h, w]
    r: Tensor  # [B, h, w, c_i]
    v_obj_cells: Tensor = field(repr=False, default=None)  # [B, h, w, a_obj]


def _he_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class SplitCapsDetector:
    """Parameters plus forward pass for the full detector."""

    def __init__(self, cfg: HeadConfig, seed: int = 0):
        self.cfg = cfg
        self.params = ParameterRegistry()
        rng = make_rng([seed, 17])
        p = self.params
        C = cfg.channels
        w1, w2 = cfg.backbone_widths
        convs = [("backbone.conv1", 3, w1), ("backbone.conv2", w1, w1),
                 ("backbone.conv3", w1, w2), ("backbone.conv4", w2, C)]
        for name, cin, cout in convs:
            p.add(f"{name}.w", _he_uniform(rng, (cout, cin, 3, 3), cin * 9))
            p.add(f"{name}.b", np.zeros(cout))

        obj_cfg, cls_cfg = cfg.layer(cfg.a_obj), cfg.layer(cfg.K)
        p.add("caps.obj.kernel", init_projection_kernel(obj_cfg, rng))
        p.add("caps.cls.kernel", init_projection_kernel(cls_cfg, rng))
        if cfg.deformable:
            p.add("caps.obj.offsets", init_offsets(obj_cfg))
            p.add("caps.cls.offsets", init_offsets(cls_cfg))
        p.add("caps.cls.bias", np.full(cfg.K, -math.log((1 - cfg.heatmap_prior) / cfg.heatmap_prior)))
        if cfg.ablation != "no_routing":
            ExcitationWeights.init(cfg.c_i, cfg.t, rng, registry=p, prefix="route")

        for head in ("offset", "size"):
            p.add(f"{head}.conv.w", _he_uniform(rng, (cfg.box_width, C, 3, 3), C * 9))
            p.add(f"{head}.conv.b", np.zeros(cfg.box_width))
            p.add(f"{head}.out.w", _he_uniform(rng, (2, cfg.box_width, 1, 1), cfg.box_width) * 0.1)
            p.add(f"{head}.out.b", np.zeros(2))

        widths = [cfg.a_obj, cfg.recon_width, cfg.recon_width, cfg.recon_width]
        for n, (fin, fout) in enumerate(zip(widths[:-1], widths[1:])):
            p.add(f"recon.fc{n + 1}.w", _he_uniform(rng, (fin, fout), fin))
            p.add(f"recon.fc{n + 1}.b", np.zeros(fout))
        bound = math.sqrt(6.0 / (cfg.recon_width + cfg.recon_pixels))
        p.add("recon.out.w", rng.uniform(-bound, bound, size=(cfg.recon_width, cfg.recon_pixels)))
        p.add("recon.out.b", np.zeros(cfg.recon_pixels))

    # -- stages ---------------------------------------------------------------

    def reference_backbone(self, image) -> Tensor:
        image = as_tensor(image)
        if image.ndim == 3:
            image = image.reshape((1,) + image.shape)
        H, W = image.shape[-2:]
        if H % self.cfg.d or W % self.cfg.d:
            raise ShapeError(f"image {H}x{W} not divisible by d={self.cfg.d}")
        p = self.params
        x = image
        for name, stride in (("conv1", 2), ("conv2", 1), ("conv3", 2), ("conv4", 1)):
            x = nx.relu(nx.conv2d(x, p[f"backbone.{name}.w"], p[f"backbone.{name}.b"], stride=stride, padding=1))
        return x

    def form_child_capsules(self, features) -> Tensor:
        features = as_tensor(features)
        B, C, h, w = features.shape
        if C != self.cfg.channels:
            raise ShapeError(f"feature channels {C} != c_i*a_i = {self.cfg.channels}")
        return features.reshape(B, self.cfg.c_i, self.cfg.a_i, h, w)

    def project(self, children: Tensor, which: str, a_j: int) -> Tensor:
        layer = self.cfg.layer(a_j)
        kernel = self.params[f"caps.{which}.kernel"]
        if self.cfg.deformable:
            return deform_capsule_project(children, kernel, self.params[f"caps.{which}.offsets"], layer)
        return conv_capsule_project(children, kernel, layer)

    def box_regression_heads(self, features) -> tuple[Tensor, Tensor]:
        p = self.params
        outs = []
        for head in ("offset", "size"):
            z = nx.relu(nx.conv2d(features, p[f"{head}.conv.w"], p[f"{head}.conv.b"], padding=1))
            outs.append(nx.conv2d(z, p[f"{head}.out.w"], p[f"{head}.out.b"]))
        return outs[0], outs[1]

    def reconstruct_mask(self, v_obj) -> Tensor:
        """[M, a_obj] (or a single vector) -> [M, n, n] masks in (0, 1)."""
        v_obj = as_tensor(v_obj)
        single = v_obj.ndim == 1
        if v_obj.shape[-1] != self.cfg.a_obj:
            raise ShapeError(f"reconstruction expects {self.cfg.a_obj}-d vectors, got {v_obj.shape}")
        z = v_obj.reshape(1, -1) if single else v_obj
        p = self.params
        for n in (1, 2, 3):
            z = nx.relu(nx.matmul(z, p[f"recon.fc{n}.w"]) + p[f"recon.fc{n}.b"])
        out = nx.sigmoid(nx.matmul(z, p["recon.out.w"]) + p["recon.out.b"])
        side = self.cfg.recon_side
        return out.reshape(side, side) if single else out.reshape(-1, side, side)

    def splitcaps_forward(self, children, features, routing_override=None) -> HeadOutput:
        cfg = self.cfg
        children = as_tensor(children)
        B, c_i, _, h, w = children.shape
        u_obj = self.project(children, "obj", cfg.a_obj).reshape(B, c_i, cfg.a_obj, h, w)
        u_cls = self.project(children, "cls", cfg.K).reshape(B, c_i, cfg.K, h, w)
        u_obj = nx.transpose(u_obj, (0, 3, 4, 1, 2))  # [B, h, w, N, a_obj]
        u_cls = nx.transpose(u_cls, (0, 3, 4, 1, 2))
        if routing_override is not None:
            r = as_tensor(routing_override)
        elif cfg.ablation == "no_routing":
            r = uniform_coefficients((B, h, w), c_i)
        else:
            weights = ExcitationWeights(self.params["route.W1"], self.params["route.W2"], cfg.t)
            r = excite(squeeze(u_obj, u_cls, cfg.literal_variance).s, weights)
        parents = route(u_obj, u_cls, r)
        logits = parents.v_cls + self.params["caps.cls.bias"]
        heatmap = nx.transpose(nx.sigmoid(logits), (0, 3, 1, 2))
        v_obj_grid = nx.transpose(parents.v_obj, (0, 3, 1, 2))
        offsets, sizes = self.box_regression_heads(features)
        return HeadOutput(heatmap, v_obj_grid, offsets, sizes, r, parents.v_obj)

    def forward(self, images, routing_override=None) -> HeadOutput:
        features = self.reference_backbone(images)
        children = self.form_child_capsules(features)
        return self.splitcaps_forward(children, features, routing_override)

    __call__ = forward
