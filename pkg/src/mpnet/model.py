"""The full two-branch network: shared encoder, branch decoders, memory
readers, classifier, embedding head and centroid head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .encoder import EncoderConfig, PointBatch, decode_ins, decode_seg, dense, encode, init_encoder
from .memory import PrototypeMemory, read_instance, read_semantic, semantic_summary
from .numerics import Parameter, Tensor, affine


@dataclass
class ModelConfig:
    num_classes: int = 6
    per_class_slots: int = 8
    temperature: float = 0.1
    use_ins_mem: bool = True
    use_seg_mem: bool = True
    centroid_hidden: int = 16
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: L.LossConfig = field(default_factory=L.LossConfig)

    @property
    def uses_memory(self) -> bool:
        return self.use_ins_mem or self.use_seg_mem


@dataclass
class Forward:
    f_seg: Tensor
    f_ins: Tensor
    fhat_seg: Tensor
    fhat_ins: Tensor
    probs: Tensor
    embeddings: Tensor
    w_ins: Tensor | None = None
    alpha_seg: Tensor | None = None
    summary: Tensor | None = None


class MPNet:
    """Parameters plus the forward pass. Memory parameters exist only when a
    memory reader is enabled, the centroid head only when its regularizer is."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.encoder.feature_dim
        self.params: dict[str, Parameter] = init_encoder(cfg.encoder, rng)
        self.params["fc.w"], self.params["fc.b"] = dense(rng, d, cfg.num_classes, "fc")
        self.params["embed.w"], self.params["embed.b"] = dense(rng, d, cfg.loss.embed_dim, "embed")
        if cfg.loss.use_reg_ins:
            # centroid head, only trained through the instance regularizer
            self.params["g.0.w"], self.params["g.0.b"] = dense(rng, d, cfg.centroid_hidden, "g.0")
            self.params["g.1.w"], self.params["g.1.b"] = dense(rng, cfg.centroid_hidden, 3, "g.1")
        self.memory: PrototypeMemory | None = None
        if cfg.uses_memory:
            self.memory = PrototypeMemory.create(cfg.per_class_slots, cfg.num_classes, d, rng, cfg.temperature)
            self.params["memory.m"] = self.memory.m

    def parameters(self) -> list[Parameter]:
        return [self.params[k] for k in sorted(self.params)]

    @property
    def g_params(self) -> dict[str, Parameter]:
        return {k: v for k, v in self.params.items() if k.startswith("g.")}

    def forward(self, batch: PointBatch) -> Forward:
        cfg = self.cfg
        shared = encode(batch, cfg.encoder, self.params)
        f_seg = decode_seg(shared, self.params)
        f_ins = decode_ins(shared, self.params)
        out = Forward(f_seg, f_ins, f_seg, f_ins, None, None)
        if self.memory is not None:
            out.summary = semantic_summary(self.memory)
        if cfg.use_ins_mem:
            out.w_ins, out.fhat_ins = read_instance(f_ins, self.memory)
        if cfg.use_seg_mem:
            out.alpha_seg, out.fhat_seg = read_semantic(f_seg, out.summary, cfg.temperature)
        out.probs = L.class_probabilities(out.fhat_seg, self.params["fc.w"], self.params["fc.b"], cfg.loss.use_squash)
        out.embeddings = affine(out.fhat_ins, self.params["embed.w"].tensor, self.params["embed.b"].tensor)
        return out

    def objective(self, batch: PointBatch, labels: L.LabeledBatch) -> tuple[Tensor, L.LossParts, Forward]:
        lc = self.cfg.loss
        out = self.forward(batch)
        if lc.use_focal:
            ce = L.focal_loss(out.probs, labels.semantic_labels, lc.focal_gamma)
        else:
            ce = L.cross_entropy(out.probs, labels.semantic_labels)
        dis = L.discriminative_loss(out.embeddings, labels, lc.sigma_v, lc.sigma_d)
        parts = L.LossParts(ce, dis)
        if lc.use_reg_seg and self.cfg.use_seg_mem:
            parts.reg_seg = L.semantic_regularizer(out.fhat_seg, out.summary, labels.semantic_labels, lc.margin_m)
        if lc.use_reg_ins:
            parts.reg_ins = L.instance_regularizer(out.fhat_ins, self.g_params, labels)
        return L.total_objective(parts, lc.lambda_ins), parts, out
