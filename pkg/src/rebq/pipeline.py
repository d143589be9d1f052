"""The full model and per-session training loop.

forward_batch runs the whole chain for a mini-batch: untracked query
generation, reconstruction of missing queries through the memory source,
modality-specific prompt selection, and the collaborative classification
forward whose joint cls output feeds the shared linear head. Variants
(ablations and the naive per-missing-type baseline) are built by
``build_variant`` from a declarative spec.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .backbone import MultimodalBackbone, PromptInjection
from .bench import Sample
from .prompt import PromptPool, PromptVector, init_pool, init_vector
from .reconstruct import (counterparts, generate_queries_batch, reconstruct_batch,
                          reconstruction_loss_from_queries)
from .tensor import AdamW, Tensor

MISSING_TYPES = ("text-only", "image-only", "complete")


@dataclass(frozen=True)
class VariantSpec:
    reconstruction: bool = True
    modality_specific_query: bool = True
    memory: str = "pool"           # pool | vector | none
    text_prompts: str = "pool"     # pool | vector | unified
    visual_prompts: str = "pool"   # pool | vector | unified
    text_mode: str = "attention"   # attention | input
    visual_mode: str = "attention"
    memory_mode: str = "attention"
    baseline: bool = False
    name: str = "canonical"

    def validate(self):
        if self.baseline:
            return
        if (self.text_prompts == "unified") != (self.visual_prompts == "unified"):
            raise ValueError("unified pool must be shared by both modalities")
        if self.memory not in ("pool", "vector", "none"):
            raise ValueError(f"bad memory kind {self.memory!r}")
        if self.reconstruction and self.memory == "none":
            raise ValueError("reconstruction requires a memory source")
        if not self.reconstruction and self.memory != "none":
            raise ValueError("a memory source without reconstruction is dead weight")
        for kind in (self.text_prompts, self.visual_prompts):
            if kind not in ("pool", "vector", "unified"):
                raise ValueError(f"bad prompt kind {kind!r}")
        for mode in (self.text_mode, self.visual_mode, self.memory_mode):
            if mode not in ("attention", "input"):
                raise ValueError(f"bad injection mode {mode!r}")
        if self.text_prompts == "unified" and self.text_mode != self.visual_mode:
            raise ValueError("a unified pool cannot mix injection modes")


VARIANT_PRESETS = {
    "canonical": VariantSpec(),
    "rebq": VariantSpec(name="rebq"),
    "no_reconstruction": VariantSpec(reconstruction=False, memory="none",
                                     name="no_reconstruction"),
    "no_modality_specific_query": VariantSpec(modality_specific_query=False,
                                              name="no_modality_specific_query"),
    "no_memory_pool": VariantSpec(memory="vector", name="no_memory_pool"),
    "no_modality_specific_pool": VariantSpec(text_prompts="unified",
                                             visual_prompts="unified",
                                             name="no_modality_specific_pool"),
    "baseline": VariantSpec(baseline=True, reconstruction=False, memory="none",
                            name="baseline"),
}


def variant_from_name(name: str) -> VariantSpec:
    try:
        return VARIANT_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; known: {sorted(VARIANT_PRESETS)}") from None


@dataclass
class ModelConfig:
    num_classes: int
    pool_size: int = 128
    memory_pool_size: int = 128
    prompt_len: int = 8
    prompted_layers: int = 8   # clamped to the backbone depth
    lam: float = 0.01          # reconstruction loss weight
    multi_label: bool = False


class RebQModel:
    def __init__(self, backbone: MultimodalBackbone, spec: VariantSpec,
                 mcfg: ModelConfig, seed: int):
        spec.validate()
        if not backbone.frozen:
            raise ValueError("RebQModel requires a frozen backbone")
        self.backbone = backbone
        self.spec = spec
        self.mcfg = mcfg
        d = backbone.config.embed_dim
        self.prompted_layers = min(mcfg.prompted_layers, backbone.config.num_layers)
        rng = np.random.default_rng(seed)

        self.folder = self.album = self.unified = self.memory = None
        self.baseline_blocks: dict[str, PromptVector] | None = None

        if spec.baseline:
            self.baseline_blocks = {
                kind: init_vector(rng, d, mcfg.prompt_len, self.prompted_layers,
                                  modality=kind)
                for kind in MISSING_TYPES
            }
        else:
            if spec.text_prompts == "unified":
                self.unified = init_pool(rng, d, mcfg.pool_size, mcfg.prompt_len,
                                         self.prompted_layers, "unified", spec.text_mode)
            else:
                self.folder = self._source(rng, spec.text_prompts, "text",
                                           spec.text_mode, mcfg)
                self.album = self._source(rng, spec.visual_prompts, "visual",
                                          spec.visual_mode, mcfg)
            if spec.memory == "pool":
                self.memory = init_pool(rng, d, mcfg.memory_pool_size, mcfg.prompt_len,
                                        self.prompted_layers, "memory", spec.memory_mode)
            elif spec.memory == "vector":
                self.memory = init_vector(rng, d, mcfg.prompt_len, self.prompted_layers,
                                          "memory", spec.memory_mode)

        self.head_w = T.normal_init(rng, (d, mcfg.num_classes))
        self.head_b = T.zeros(mcfg.num_classes, trainable=True)

    def _source(self, rng, kind, modality, mode, mcfg):
        if kind == "pool":
            return init_pool(rng, self.backbone.config.embed_dim, mcfg.pool_size,
                             mcfg.prompt_len, self.prompted_layers, modality, mode)
        return init_vector(rng, self.backbone.config.embed_dim, mcfg.prompt_len,
                           self.prompted_layers, modality, mode)

    # -- parameters ----------------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, source in (("folder", self.folder), ("album", self.album),
                             ("unified", self.unified), ("memory", self.memory)):
            if source is not None:
                out.update(source.named_parameters(name))
        if self.baseline_blocks:
            for kind, vec in self.baseline_blocks.items():
                out.update(vec.named_parameters(f"baseline.{kind}"))
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def parameter_bytes(self) -> bytes:
        named = self.named_parameters()
        return b"".join(named[k].data.tobytes() for k in sorted(named))

    @property
    def uses_reconstruction(self) -> bool:
        return self.spec.reconstruction and self.memory is not None

    def text_source(self):
        return self.unified if self.unified is not None else self.folder

    def visual_source(self):
        return self.unified if self.unified is not None else self.album


def build_variant(spec: VariantSpec | str, backbone: MultimodalBackbone,
                  mcfg: ModelConfig, seed: int = 0) -> RebQModel:
    if isinstance(spec, str):
        spec = variant_from_name(spec)
    return RebQModel(backbone, spec, mcfg, seed)


# -- forward -----------------------------------------------------------------------------


@dataclass
class ForwardInfo:
    order: list[int]                       # permutation applied to the batch
    reconstructed_text: list[bool]         # aligned with the original batch order
    reconstructed_visual: list[bool]
    injected: list[tuple[str, ...]]        # prompt sources injected per sample


def _group_indices(samples: list[Sample]):
    idx_t = [i for i, s in enumerate(samples) if s.missing_type == "text-only"]
    idx_v = [i for i, s in enumerate(samples) if s.missing_type == "image-only"]
    idx_c = [i for i, s in enumerate(samples) if s.missing_type == "complete"]
    return idx_t, idx_v, idx_c


def _injection_for(model: RebQModel, sources_blocks) -> PromptInjection | None:
    """Combine (mode, block) pairs into one injection payload."""
    attn = None
    inputs: list[Tensor] = []
    for mode, block in sources_blocks:
        if mode == "attention":
            attn = block if attn is None else T.concat([attn, block], axis=3)
        else:
            inputs.append(block)
    if attn is None and not inputs:
        return None
    layers = model.prompted_layers if attn is not None else 0
    return PromptInjection(attn=attn, input_blocks=inputs, num_prompted_layers=layers)


def forward_batch(model: RebQModel, samples: list[Sample]) -> tuple[Tensor, ForwardInfo]:
    """Logits for a mini-batch, grouped by missing type.

    Returns logits in group order (text-only, image-only, complete) plus the
    permutation mapping logits rows back to the input batch.
    """
    for s in samples:
        if not s.has_text and not s.has_visual:
            raise ValueError(f"sample {s.id} is missing both modalities")
    backbone = model.backbone
    idx_t, idx_v, idx_c = _group_indices(samples)
    order = idx_t + idx_v + idx_c
    ordered = [samples[i] for i in order]
    n_t, n_v = len(idx_t), len(idx_v)

    gen = generate_queries_batch(ordered, backbone)
    q_text_raw, q_vis_raw = gen.q_text.data, gen.q_visual.data

    rec_text = [False] * len(samples)
    rec_vis = [False] * len(samples)
    use_recon = (model.uses_reconstruction and model.spec.modality_specific_query
                 and n_t + n_v > 0)
    if use_recon:
        mem = Tensor(gen.memory.data[:n_t + n_v])
        recon = reconstruct_batch(ordered[:n_t + n_v], mem, model.memory, backbone,
                                  model.prompted_layers)
        q_hat_visual, q_hat_text = recon[:n_t], recon[n_t:]
        for i in idx_t:
            rec_vis[i] = True
        for i in idx_v:
            rec_text[i] = True
        q_text_eff = T.concat([Tensor(q_text_raw[:n_t]), q_hat_text,
                               Tensor(q_text_raw[n_t + n_v:])], axis=0)
        q_vis_eff = T.concat([q_hat_visual, Tensor(q_vis_raw[n_t:])], axis=0)
    else:
        q_text_eff = Tensor(q_text_raw)
        q_vis_eff = Tensor(q_vis_raw)

    emb = backbone.embed_batch(ordered)
    segments = backbone.unified_segments(emb)

    if model.spec.baseline:
        logits = _baseline_logits(model, segments, n_t, n_v, len(idx_c))
        injected = [("baseline",)] * len(samples)
        return logits, ForwardInfo(order, rec_text, rec_vis, injected)

    if model.spec.modality_specific_query:
        p_text = model.text_source().select(q_text_eff)
        p_vis = model.visual_source().select(q_vis_eff)
        inj = _injection_for(model, [(model.spec.text_mode, p_text),
                                     (model.spec.visual_mode, p_vis)])
        out = backbone.forward(segments, inj)
        logits = T.affine(out[:, 0], model.head_w, model.head_b)
        injected = [("text", "visual")] * len(samples)
        return logits, ForwardInfo(order, rec_text, rec_vis, injected)

    # Without modality-specific queries only the available modality's prompts
    # are injected, so prefix lengths differ per group and each group runs
    # its own classification forward.
    logits, injected = _per_group_logits(model, segments, q_text_eff, q_vis_eff,
                                         n_t, n_v, len(samples), order)
    return logits, ForwardInfo(order, rec_text, rec_vis, injected)


def _classification_losses(model: RebQModel, batch: list[Sample]) -> tuple[Tensor, Tensor]:
    """Fused training-step losses (L_c, L_r) for one mini-batch.

    Equivalent to forward_batch plus reconstruction_loss on the complete
    subset, but the untracked unified passes are shared between the two and
    likewise the tracked memory-injected passes, which roughly halves the
    per-step backbone work.
    """
    backbone = model.backbone
    cfg = backbone.config
    lam = model.mcfg.lam
    idx_t, idx_v, idx_c = _group_indices(batch)
    order = idx_t + idx_v + idx_c
    ordered = [batch[i] for i in order]
    n_t, n_v, n_c = len(idx_t), len(idx_v), len(idx_c)
    b = len(batch)

    use_recon_cls = (model.uses_reconstruction and model.spec.modality_specific_query
                     and n_t + n_v > 0)
    use_lr = lam > 0.0 and model.uses_reconstruction and n_c > 0

    # one untracked unified pass over the batch plus, when the reconstruction
    # loss is active, the masked counterparts of every complete sample;
    # embeddings are frozen-backbone constants, so each row embeds once and
    # later passes slice from the same arrays
    rows = list(ordered)
    if use_lr:
        complete = ordered[n_t + n_v:]
        pairs = [counterparts(s, cfg.num_patches, cfg.patch_dim) for s in complete]
        rows += [p[0] for p in pairs] + [p[1] for p in pairs]
    with T.no_grad():
        emb_all = backbone.embed_batch(rows)
    gen = generate_queries_batch(rows, backbone, emb=emb_all)
    q_text_raw = gen.q_text.data[:b]
    q_vis_raw = gen.q_visual.data[:b]

    def emb_slice(idx):
        from .backbone import EmbeddedBatch
        return EmbeddedBatch(text=Tensor(emb_all.text.data[idx]),
                             visual=Tensor(emb_all.visual.data[idx]))

    # one tracked memory-injected pass over every row that needs reconstructing
    recon_rows: list[Sample] = []
    recon_idx: list[int] = []
    mem_rows: list[np.ndarray] = []
    if use_recon_cls:
        recon_rows += ordered[:n_t + n_v]
        recon_idx += list(range(n_t + n_v))
        mem_rows.append(gen.memory.data[:n_t + n_v])
    if use_lr:
        recon_rows += rows[b:]
        recon_idx += list(range(b, len(rows)))
        mem_rows.append(gen.memory.data[b:])
    recon = None
    if recon_rows:
        recon = reconstruct_batch(recon_rows, Tensor(np.concatenate(mem_rows)),
                                  model.memory, backbone, model.prompted_layers,
                                  emb=emb_slice(recon_idx))

    if use_recon_cls:
        q_hat_visual, q_hat_text = recon[:n_t], recon[n_t:n_t + n_v]
        q_text_eff = T.concat([Tensor(q_text_raw[:n_t]), q_hat_text,
                               Tensor(q_text_raw[n_t + n_v:])], axis=0)
        q_vis_eff = T.concat([q_hat_visual, Tensor(q_vis_raw[n_t:])], axis=0)
    else:
        q_text_eff = Tensor(q_text_raw)
        q_vis_eff = Tensor(q_vis_raw)

    segments = backbone.unified_segments(emb_slice(list(range(b))))
    if model.spec.baseline:
        logits = _baseline_logits(model, segments, n_t, n_v, n_c)
    elif model.spec.modality_specific_query:
        p_text = model.text_source().select(q_text_eff)
        p_vis = model.visual_source().select(q_vis_eff)
        inj = _injection_for(model, [(model.spec.text_mode, p_text),
                                     (model.spec.visual_mode, p_vis)])
        out = backbone.forward(segments, inj)
        logits = T.affine(out[:, 0], model.head_w, model.head_b)
    else:
        logits, _ = _per_group_logits(model, segments, q_text_eff, q_vis_eff,
                                      n_t, n_v, b, order)

    target = _targets(model, ordered)
    if model.mcfg.multi_label:
        l_c = T.binary_cross_entropy(logits, target)
    else:
        l_c = T.cross_entropy(logits, target)

    if use_lr:
        base = len(recon_rows) - 2 * n_c
        q_hat_v_lr = recon[base:base + n_c]
        q_hat_t_lr = recon[base + n_c:]
        gt_t = Tensor(gen.q_text.data[n_t + n_v:b])
        gt_v = Tensor(gen.q_visual.data[n_t + n_v:b])
        l_r = reconstruction_loss_from_queries(gt_t, q_hat_t_lr, gt_v, q_hat_v_lr)
    else:
        l_r = Tensor(0.0)
    return l_c, l_r


def _baseline_logits(model: RebQModel, segments, n_t: int, n_v: int, n_c: int) -> Tensor:
    blocks = []
    d = model.backbone.config.embed_dim
    for kind, count in (("text-only", n_t), ("image-only", n_v), ("complete", n_c)):
        if count:
            blocks.append(model.baseline_blocks[kind].select(Tensor(np.zeros((count, d)))))
    block = blocks[0] if len(blocks) == 1 else T.concat(blocks, axis=0)
    inj = _injection_for(model, [("attention", block)])
    out = model.backbone.forward(segments, inj)
    return T.affine(out[:, 0], model.head_w, model.head_b)


def _per_group_logits(model: RebQModel, segments, q_text_eff, q_vis_eff,
                      n_t: int, n_v: int, b: int, order):
    text_src, vis_src = model.text_source(), model.visual_source()
    logits_parts = []
    injected: list[tuple[str, ...]] = [()] * b
    groups = [("text-only", slice(0, n_t), [("text", text_src, q_text_eff)]),
              ("image-only", slice(n_t, n_t + n_v), [("visual", vis_src, q_vis_eff)]),
              ("complete", slice(n_t + n_v, b),
               [("text", text_src, q_text_eff), ("visual", vis_src, q_vis_eff)])]
    for _, sl, sources in groups:
        count = sl.stop - sl.start
        if not count:
            continue
        seg_group = [seg[sl] for seg in segments]
        pairs, tags = [], []
        for tag, src, q_eff in sources:
            mode = model.spec.text_mode if tag == "text" else model.spec.visual_mode
            pairs.append((mode, src.select(q_eff[sl])))
            tags.append(tag)
        out = model.backbone.forward(seg_group, _injection_for(model, pairs))
        logits_parts.append(T.affine(out[:, 0], model.head_w, model.head_b))
        for i in order[sl]:
            injected[i] = tuple(tags)
    logits = logits_parts[0] if len(logits_parts) == 1 else T.concat(logits_parts, axis=0)
    return logits, injected


def forward_sample(model: RebQModel, sample: Sample) -> Tensor:
    logits, _ = forward_batch(model, [sample])
    return T.reshape(logits, (-1,))


def predict(model: RebQModel, sample: Sample):
    """Task-agnostic prediction over the full class set."""
    with T.no_grad():
        logits = forward_sample(model, sample).data
    if model.mcfg.multi_label:
        return sorted(int(c) for c in np.nonzero(logits > 0.0)[0])
    return int(np.argmax(logits))


def predict_batch(model: RebQModel, samples: list[Sample], batch_size: int = 64):
    preds: list = [None] * len(samples)
    with T.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            logits, info = forward_batch(model, chunk)
            vals = logits.data
            for row, orig in enumerate(info.order):
                if model.mcfg.multi_label:
                    preds[start + orig] = sorted(int(c) for c in np.nonzero(vals[row] > 0.0)[0])
                else:
                    preds[start + orig] = int(np.argmax(vals[row]))
    return preds


# -- training ------------------------------------------------------------------------------


@dataclass
class OptimizerConfig:
    base_lr: float = 1e-4
    warmup_frac: float = 0.1
    weight_decay: float = 0.01
    batch_size: int = 4


@dataclass
class StepLog:
    step: int
    total: float
    classification: float
    reconstruction: float
    lr: float


@dataclass
class TrainingLog:
    steps: list[StepLog] = field(default_factory=list)

    def mean(self, attr: str) -> float:
        return float(np.mean([getattr(s, attr) for s in self.steps]))


def _targets(model: RebQModel, batch: list[Sample]) -> Tensor:
    c = model.mcfg.num_classes
    if model.mcfg.multi_label:
        rows = np.zeros((len(batch), c))
        for i, s in enumerate(batch):
            for lbl in s.label:
                if not 0 <= lbl < c:
                    raise ValueError(f"label {lbl} out of range [0, {c})")
                rows[i, lbl] = 1.0
        return Tensor(rows)
    return Tensor(T.one_hot([s.label for s in batch], c))


def train_task(model: RebQModel, samples: list[Sample], epochs: int,
               opt_cfg: OptimizerConfig, seed: int) -> TrainingLog:
    """Optimize pools and head on one session's data; the backbone stays frozen.

    The joint objective is classification loss plus lam times the
    reconstruction loss over the modality-complete subset of each batch
    (zero when the batch has none).
    """
    if not samples:
        raise ValueError("train_task: empty session")
    rng = np.random.default_rng(seed)
    params = model.parameters()
    steps_per_epoch = math.ceil(len(samples) / opt_cfg.batch_size)
    total_steps = epochs * steps_per_epoch
    opt = AdamW(params, base_lr=opt_cfg.base_lr, total_steps=total_steps,
                warmup_frac=opt_cfg.warmup_frac, weight_decay=opt_cfg.weight_decay)
    lam = model.mcfg.lam
    log = TrainingLog()
    step = 0
    for _ in range(epochs):
        perm = rng.permutation(len(samples))
        for start in range(0, len(samples), opt_cfg.batch_size):
            batch = [samples[i] for i in perm[start:start + opt_cfg.batch_size]]
            l_c, l_r = _classification_losses(model, batch)
            total = T.add(l_c, T.scale(l_r, lam))
            lr_now = opt.current_lr()
            total.backward()
            opt.step()
            log.steps.append(StepLog(step=step, total=total.item(),
                                     classification=l_c.item(),
                                     reconstruction=l_r.item(), lr=lr_now))
            step += 1
    return log
