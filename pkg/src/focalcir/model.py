"""The retrieval model: query/target branches, loss, training, checkpoints.

The query branch encodes (reference patches, box, text) with the modulated
fusion encoder and reads the representation off a dedicated cls token; the
target branch encodes target patches alone and mean-pools the fusion-query
outputs. Both project into the shared embedding space and l2-normalize.
Training minimizes a one-directional in-batch contrastive loss (query ->
target) at fixed temperature, with two AdamW groups: the modulation
predictor trains 10x faster than the encoder stack, mirroring the reference
setting's differential rates.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from focalcir.caam import CaamParams, init_caam_params, predict_beta
from focalcir.encoders import EncoderParams, TextEmbedding
from focalcir.errors import CheckpointError, ConfigError, ContractError, DimensionError
from focalcir.fusion import (
    FusionParams,
    encode_target,
    init_fusion_params,
    multimodal_encode,
    region_mask_from_bbox,
)
from focalcir.geometry import BBox
from focalcir.numerics.optim import AdamState, adam_step
from focalcir.numerics.tensor import (
    Tape,
    Tensor,
    add_bias,
    backward,
    concat_rows,
    diag_col,
    l2_normalize_rows,
    log,
    matmul,
    mean_over_rows,
    scale,
    softmax_rows,
    sum_all,
    transpose,
)

_UNIT_ROW_TOL = 1e-6


@dataclass
class ModelConfig:
    """Architecture knobs; defaults are the desk-scale configuration."""

    d_model: int = 32
    d_embed: int = 32
    m_queries: int = 8
    k_probes: int = 8
    l_text: int = 4
    n_blocks: int = 2
    n_heads: int = 1
    ffn_mult: int = 2
    crm_variant: str = "transformer"
    crm_layers: int = 2
    modulation: str = "scalar"  # "scalar" | "vector"
    probes_learnable: bool = True
    fusion_queries_trainable: bool = False
    caam_shares_encoder: bool = True
    bias_in_all_blocks: bool = True
    token_init: float = 0.02
    weight_init: float = 0.1
    tau: float = 0.07  # fixed contrastive temperature

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for name in ("d_model", "d_embed", "m_queries", "k_probes", "l_text", "n_blocks", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.crm_variant not in ("avg", "mlp", "transformer"):
            raise ConfigError(f"unknown crm_variant {self.crm_variant!r}")
        if self.modulation not in ("scalar", "vector"):
            raise ConfigError(f"unknown modulation form {self.modulation!r}")
        if not (0.0 < self.tau):
            raise ConfigError("tau must be positive")


@dataclass
class TrainConfig:
    """Desk-scale training defaults.

    The learning rates keep the reference setting's 10:1 ratio between the
    modulation predictor and the encoder stack, but are raised for training
    from random initialization; a fine-tuning run on pretrained weights
    would use 1e-4 / 1e-5.
    """

    epochs: int = 10
    batch_size: int = 32
    lr_caam: float = 2e-3
    lr_encoder: float = 2e-4
    weight_decay: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    seed: int = 7
    fixed_beta: float | None = None  # None trains the adaptive model
    subsets: list[str] | None = None  # restrict training data, e.g. leave-one-out
    roi_crop: bool = False  # crop-to-box ablation branch

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for in-batch contrast")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        for name in ("lr_caam", "lr_encoder"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


@dataclass
class QuerySample:
    """A resolved retrieval query (embeddings, not ids)."""

    patches: np.ndarray  # (n, d_model) reference patch embeddings
    grid: tuple[int, int]
    bbox: BBox | None
    text: TextEmbedding


@dataclass
class TrainExample:
    query: QuerySample
    target_patches: np.ndarray


class ModelParams:
    """All weights plus the frozen encoders, seeded and enumerable by name."""

    def __init__(
        self,
        config: ModelConfig,
        encoders: EncoderParams,
        seed: int,
        zero_modulation_head: bool = True,
    ):
        config.validate()
        if encoders.d_model != config.d_model or encoders.l_text != config.l_text:
            raise DimensionError(
                f"encoder dims ({encoders.d_model}, l_text={encoders.l_text}) do not match "
                f"model config ({config.d_model}, l_text={config.l_text})"
            )
        self.config = config
        self.encoders = encoders
        self.seed = int(seed)
        rng = np.random.default_rng(np.random.SeedSequence(self.seed))
        self.fusion = init_fusion_params(
            rng,
            config.d_model,
            config.m_queries,
            config.n_blocks,
            n_heads=config.n_heads,
            ffn_mult=config.ffn_mult,
            token_init=config.token_init,
            weight_init=config.weight_init,
            bias_in_all_blocks=config.bias_in_all_blocks,
            queries_trainable=config.fusion_queries_trainable,
        )
        private = None
        if not config.caam_shares_encoder:
            private = init_fusion_params(
                rng,
                config.d_model,
                config.m_queries,
                config.n_blocks,
                n_heads=config.n_heads,
                ffn_mult=config.ffn_mult,
                token_init=config.token_init,
                weight_init=config.weight_init,
                bias_in_all_blocks=config.bias_in_all_blocks,
                queries_trainable=config.fusion_queries_trainable,
            )
        self.caam = init_caam_params(
            rng,
            config.d_model,
            config.k_probes,
            config.m_queries,
            crm_variant=config.crm_variant,
            crm_layers=config.crm_layers,
            output_form=config.modulation,
            probes_learnable=config.probes_learnable,
            token_init=config.token_init,
            weight_init=config.weight_init,
            ffn_mult=config.ffn_mult,
            zero_head=zero_modulation_head,
            private_fusion=private,
        )
        self.rep_cls = Tensor(
            rng.normal(0.0, config.token_init, size=(1, config.d_model)), requires_grad=True
        )
        self.w_query = Tensor(
            rng.normal(0.0, config.weight_init, size=(config.d_model, config.d_embed)),
            requires_grad=True,
        )
        self.b_query = Tensor(np.zeros((1, config.d_embed)), requires_grad=True)
        self.w_target = Tensor(
            rng.normal(0.0, config.weight_init, size=(config.d_model, config.d_embed)),
            requires_grad=True,
        )
        self.b_target = Tensor(np.zeros((1, config.d_embed)), requires_grad=True)
        self.tau = config.tau

    # -- enumeration ---------------------------------------------------------

    @staticmethod
    def _attention_named(prefix: str, a) -> list[tuple[str, Tensor]]:
        out = [
            (f"{prefix}.wq", a.wq), (f"{prefix}.bq", a.bq),
            (f"{prefix}.wk", a.wk), (f"{prefix}.bk", a.bk),
            (f"{prefix}.wv", a.wv), (f"{prefix}.bv", a.bv),
        ]
        if a.wo is not None:
            out += [(f"{prefix}.wo", a.wo), (f"{prefix}.bo", a.bo)]
        return out

    @classmethod
    def _fusion_named(cls, prefix: str, fusion: FusionParams) -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}.queries", fusion.queries)]
        for i, b in enumerate(fusion.blocks):
            p = f"{prefix}.block{i}"
            out += cls._attention_named(f"{p}.self", b.self_attn)
            out += cls._attention_named(f"{p}.cross", b.cross_attn)
            out += [
                (f"{p}.ln_self.gain", b.ln_self.gain), (f"{p}.ln_self.shift", b.ln_self.shift),
                (f"{p}.ln_cross.gain", b.ln_cross.gain), (f"{p}.ln_cross.shift", b.ln_cross.shift),
                (f"{p}.ln_ffn.gain", b.ln_ffn.gain), (f"{p}.ln_ffn.shift", b.ln_ffn.shift),
                (f"{p}.ffn.w1", b.ffn_w1), (f"{p}.ffn.b1", b.ffn_b1),
                (f"{p}.ffn.w2", b.ffn_w2), (f"{p}.ffn.b2", b.ffn_b2),
            ]
        return out

    def _caam_named(self) -> list[tuple[str, Tensor]]:
        c = self.caam
        out = [("caam.probes", c.probes), ("caam.cls", c.cls)]
        crm = c.crm
        if crm.variant == "mlp":
            out += [
                ("caam.crm.mlp.w1", crm.mlp_w1), ("caam.crm.mlp.b1", crm.mlp_b1),
                ("caam.crm.mlp.w2", crm.mlp_w2), ("caam.crm.mlp.b2", crm.mlp_b2),
            ]
        elif crm.variant == "transformer":
            for i, layer in enumerate(crm.layers):
                p = f"caam.crm.layer{i}"
                out += self._attention_named(f"{p}.self", layer.self_attn)
                out += [
                    (f"{p}.ln_attn.gain", layer.ln_attn.gain),
                    (f"{p}.ln_attn.shift", layer.ln_attn.shift),
                    (f"{p}.ffn.w1", layer.ffn_w1), (f"{p}.ffn.b1", layer.ffn_b1),
                    (f"{p}.ffn.w2", layer.ffn_w2), (f"{p}.ffn.b2", layer.ffn_b2),
                    (f"{p}.ln_ffn.gain", layer.ln_ffn.gain),
                    (f"{p}.ln_ffn.shift", layer.ln_ffn.shift),
                ]
        out += [("caam.wc", c.wc), ("caam.bc", c.bc)]
        if c.fusion is not None:
            out += self._fusion_named("caam.fusion", c.fusion)
        return out

    def named_params(self) -> list[tuple[str, Tensor]]:
        """Every weight tensor in a stable order (frozen ones included)."""
        out = self._fusion_named("fusion", self.fusion)
        out += self._caam_named()
        out += [
            ("rep_cls", self.rep_cls),
            ("head.query.w", self.w_query), ("head.query.b", self.b_query),
            ("head.target.w", self.w_target), ("head.target.b", self.b_target),
        ]
        return out

    def param_groups(self) -> dict[str, list[Tensor]]:
        """Trainable tensors split into the two optimizer groups."""
        caam, encoder = [], []
        for name, t in self.named_params():
            if not t.requires_grad:
                continue
            (caam if name.startswith("caam.") else encoder).append(t)
        return {"caam": caam, "encoder": encoder}


# ---------------------------------------------------------------------------
# forward passes


def query_representation(
    sample: QuerySample,
    params: ModelParams,
    beta_override: float | None = None,
    use_bbox: bool = True,
    roi_crop: bool = False,
):
    """f_q plus the modulation actually applied (float, or array in vector form).

    beta_override bypasses the predictor entirely and applies the given
    constant; use_bbox=False drops the box (and the mask) altogether.
    """
    if roi_crop and use_bbox and sample.bbox is not None:
        mask = region_mask_from_bbox(sample.bbox, sample.grid)
        visible = sample.patches[mask.values == 1.0]
        enc = multimodal_encode(
            visible, sample.text, params.fusion, mask=None, beta=0.0, cls_token=params.rep_cls
        )
        applied = 0.0
    elif not use_bbox or sample.bbox is None:
        enc = multimodal_encode(
            sample.patches, sample.text, params.fusion, mask=None, beta=0.0,
            cls_token=params.rep_cls,
        )
        applied = 0.0
    else:
        mask = region_mask_from_bbox(sample.bbox, sample.grid)
        if beta_override is not None:
            beta = float(beta_override)
            applied = beta
        else:
            beta = predict_beta(sample.patches, sample.text, params.fusion, params.caam)
            applied = float(beta.data[0, 0]) if beta.data.shape == (1, 1) else beta.data.copy()
        enc = multimodal_encode(
            sample.patches, sample.text, params.fusion, mask=mask, beta=beta,
            cls_token=params.rep_cls, patch_grid=sample.grid,
        )
    f_q = l2_normalize_rows(add_bias(matmul(enc.cls_out, params.w_query), params.b_query))
    return f_q, applied


def target_representation(patches: np.ndarray, params: ModelParams) -> Tensor:
    """f_t: mean-pooled fusion-query outputs, projected and normalized."""
    fused = encode_target(patches, params.fusion)
    pooled = mean_over_rows(fused)
    return l2_normalize_rows(add_bias(matmul(pooled, params.w_target), params.b_target))


def contrastive_loss(f_q: Tensor, f_t: Tensor, tau: float) -> Tensor:
    """One-directional InfoNCE: -(1/B) sum_i log softmax_j(sim(q_i, t_j)/tau)_ii."""
    if f_q.data.shape != f_t.data.shape:
        raise DimensionError(f"query/target batches disagree: {f_q.data.shape} vs {f_t.data.shape}")
    for name, t in (("query", f_q), ("target", f_t)):
        norms = np.linalg.norm(t.data, axis=1)
        if np.max(np.abs(norms - 1.0)) > _UNIT_ROW_TOL:
            raise ContractError(f"{name} rows must be unit-norm, worst |1-norm| = "
                                f"{np.max(np.abs(norms - 1.0)):.2e}")
    b = f_q.data.shape[0]
    sims = matmul(f_q, transpose(f_t))
    probs = softmax_rows(scale(sims, 1.0 / float(tau)))
    picked = diag_col(probs)
    return scale(sum_all(log(picked)), -1.0 / b)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    epoch_losses: list[float] = field(default_factory=list)
    epoch_mean_betas: list[float] = field(default_factory=list)
    steps: int = 0


def _beta_scalar(applied) -> float:
    if isinstance(applied, np.ndarray):
        return float(np.mean(applied))
    return float(applied)


def train(params: ModelParams, examples: list[TrainExample], cfg: TrainConfig) -> TrainResult:
    """In-place training; deterministic for a fixed (params, examples, cfg)."""
    cfg.validate()
    if not examples:
        raise ContractError("no training examples")
    groups = params.param_groups()
    adaptive = cfg.fixed_beta is None
    states = {
        "caam": AdamState(
            lr=cfg.lr_caam, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
            weight_decay=cfg.weight_decay, eps=cfg.adam_eps,
        ),
        "encoder": AdamState(
            lr=cfg.lr_encoder, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
            weight_decay=cfg.weight_decay, eps=cfg.adam_eps,
        ),
    }
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    result = TrainResult()
    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(examples))
        epoch_losses: list[float] = []
        epoch_betas: list[float] = []
        for at in range(0, len(order), cfg.batch_size):
            idx = order[at : at + cfg.batch_size]
            if len(idx) < 2:
                continue  # a singleton batch has no in-batch negatives
            tape = Tape()
            with tape:
                fq_rows, ft_rows = [], []
                for i in idx:
                    ex = examples[int(i)]
                    f_q, applied = query_representation(
                        ex.query, params,
                        beta_override=cfg.fixed_beta, roi_crop=cfg.roi_crop,
                    )
                    fq_rows.append(f_q)
                    ft_rows.append(target_representation(ex.target_patches, params))
                    epoch_betas.append(_beta_scalar(applied))
                loss = contrastive_loss(concat_rows(fq_rows), concat_rows(ft_rows), params.tau)
            backward(loss, tape)
            if adaptive and groups["caam"]:
                adam_step(groups["caam"], [p.grad for p in groups["caam"]], states["caam"])
            adam_step(groups["encoder"], [p.grad for p in groups["encoder"]], states["encoder"])
            epoch_losses.append(loss.item())
            tape.clear()
            result.steps += 1
        result.epoch_losses.append(float(np.mean(epoch_losses)))
        result.epoch_mean_betas.append(float(np.mean(epoch_betas)))
    return result


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"FCCKPT1\n"


def save_checkpoint(path, params: ModelParams, meta: dict | None = None) -> None:
    """Versioned binary dump; bit-identical round trips, deterministic bytes."""
    named = params.named_params()
    header = {
        "version": 1,
        "meta": meta or {},
        "seed": params.seed,
        "model_config": asdict(params.config),
        "encoder": {
            "seed": params.encoders.seed,
            "d_latent": params.encoders.d_latent,
            "d_model": params.encoders.d_model,
            "l_text": params.encoders.l_text,
        },
        "params": [{"name": n, "shape": list(t.data.shape)} for n, t in named],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise CheckpointError(f"{path} is not a model checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        if header.get("version") != 1:
            raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
        enc_info = header["encoder"]
        encoders = EncoderParams(
            seed=enc_info["seed"], d_latent=enc_info["d_latent"],
            d_model=enc_info["d_model"], l_text=enc_info["l_text"],
        )
        config = ModelConfig(**header["model_config"])
        params = ModelParams(config, encoders, seed=header["seed"])
        named = dict(params.named_params())
        if set(named) != {p["name"] for p in header["params"]}:
            raise CheckpointError("checkpoint parameter set does not match the rebuilt model")
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            want = named[entry["name"]]
            if tuple(want.data.shape) != shape:
                raise CheckpointError(
                    f"parameter {entry['name']} has shape {want.data.shape}, file says {shape}"
                )
            raw = fh.read(8 * int(np.prod(shape)))
            want.data = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return params, header["meta"]


def config_digest(payload: dict) -> str:
    """Stable short hash of a resolved configuration dict."""
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
