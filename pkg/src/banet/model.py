"""The assembled network: initialization, forward passes, parameter counts."""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import autograd as ad
from .config import BackboneConfig, FusionConfig, ModelConfig
from .fusion import banet_forward
from .tensor import InvalidArgument
from .weights import Scope, WeightStore

# smallest spatial size every stage accepts; used to materialise weights
_INIT_SIZE = 32


@dataclass
class BANet:
    config: ModelConfig
    weights: WeightStore

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "BANet":
        """Fresh weights, deterministic per seed (created in forward order)."""
        store = WeightStore()
        sc = Scope(store, rng=np.random.default_rng(seed))
        dummy = ad.constant(np.zeros((1, 3, _INIT_SIZE, _INIT_SIZE), np.float32))
        with ad.no_grad():
            banet_forward(dummy, sc, config)
        return cls(config, store)

    @classmethod
    def from_weights(cls, store: WeightStore, emsa_order: str = "literal") -> "BANet":
        return cls(infer_config(store, emsa_order), store)

    def scope(self, training: bool = False, track: bool = False, hooks=None) -> Scope:
        return Scope(self.weights, training=training, track=track, hooks=hooks)

    def forward(self, images, sc: Scope | None = None) -> ad.Node:
        sc = sc or self.scope()
        x = images if isinstance(images, ad.Node) else ad.constant(np.asarray(images, np.float32))
        return banet_forward(x, sc, self.config)

    def predict_logits(self, images: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.forward(images).value

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Class-index maps; argmax ties resolve to the lowest class index."""
        return self.predict_logits(images).argmax(axis=1)

    def parameter_count(self, prefix: str = "") -> int:
        return self.weights.count(prefix)


def count_parameters(config: ModelConfig, prefix: str = "") -> int:
    return BANet.initialize(config).parameter_count(prefix)


def infer_config(store: WeightStore, emsa_order: str = "literal") -> ModelConfig:
    """Recover the architecture from weight names and shapes."""
    def shape(name):
        if name not in store:
            raise InvalidArgument(f"weights lack {name!r}; not a model weight file")
        return store[name].shape

    dims, depths, heads, red = [], [], [], []
    for i in range(1, 5):
        blocks = {int(m.group(1)) for n in store
                  if (m := re.match(rf"backbone\.stage{i}\.block(\d+)\.", n))}
        if not blocks:
            raise InvalidArgument(f"weights lack blocks for stage {i}")
        depths.append(len(blocks))
        base = f"backbone.stage{i}.block0.emsa"
        dims.append(shape(f"{base}.q.weight")[0])
        heads.append(shape(f"{base}.mix.weight")[0])
        red.append(shape(f"{base}.sr.weight")[-1] - 1 if f"{base}.sr.weight" in store else 1)
    fc1 = shape("backbone.stage1.block0.mlp.fc1.weight")
    stem_hidden = shape("backbone.stem.conv1.weight")[0]
    backbone = BackboneConfig(
        stage_dims=tuple(dims), stage_depths=tuple(depths), heads=tuple(heads),
        kv_reduction=tuple(red), mlp_ratio=fc1[0] / fc1[1],
        stem_hidden=None if stem_hidden == max(dims[0] // 2, 1) else stem_hidden,
        emsa_order=emsa_order,
    )
    head_in = shape("head.conv.weight")[1]
    c3 = dims[2]
    if "fam.lam.conv.weight" in store:
        mode = "fam"
    elif "fusion.sum_proj.weight" in store:
        mode = "sum"
    elif "texture.t1.conv.weight" in store:
        mode = "cat"
    else:
        mode = "none"
    la_q = shape("fam.aem.lam.la.q.weight")
    fusion = FusionConfig(
        fusion_mode=mode,
        head_hidden_channels=shape("head.conv.weight")[0],
        num_classes=shape("head.cls.weight")[0],
        la_key_ratio=max(la_q[1] // la_q[0], 1),
    )
    texture = (64, 128)
    if mode != "none":
        texture = (shape("texture.t1.conv.weight")[0], shape("texture.t4.conv.weight")[0])
        expected = {"fam": c3 + texture[1], "cat": c3 + texture[1], "sum": texture[1]}[mode]
        if head_in != expected:
            raise InvalidArgument(f"head input channels {head_in} inconsistent with {mode} fusion")
    return ModelConfig(backbone=backbone, fusion=fusion, texture_channels=texture)
