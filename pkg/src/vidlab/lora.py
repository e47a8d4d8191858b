"""Low-rank adapter stack: shared basis + coefficient matrices, coefficient
dropout, identity freezing, multi-concept composition, and serialization.

Each adapted projection carries a triple (a1, b1, b2): the basis/coefficient
pair learned on shuffled frames in the first stage, plus a second
coefficient matrix added on the frozen pair and learned on the full clip in
the second stage. The effective update is W + scale*a1@b1 + scale*a1@b2,
with Bernoulli dropout applied to coefficient matrices only (never the
basis) during training.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import torch

from . import serialization


class LoraError(ValueError):
    pass


@dataclass(frozen=True)
class DropoutSpec:
    """Coefficient-matrix dropout: keep probability 1-p, inverted rescaling."""

    p: float
    rescale: bool = True

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"dropout probability must be in [0,1], got {self.p}")


def dropout_b(b: torch.Tensor, spec: DropoutSpec, generator: torch.Generator) -> torch.Tensor:
    """Training-path Bernoulli mask over a coefficient matrix.

    Kept entries are scaled by 1/(1-p) when rescaling so E[b'] = b; p=1
    returns zeros (division guard). The inference path never calls this.
    """
    if spec.p == 0.0:
        return b
    if spec.p == 1.0:
        return torch.zeros_like(b)
    keep = (torch.rand(b.shape, generator=generator) >= spec.p).to(b.dtype)
    if spec.rescale:
        keep = keep / (1.0 - spec.p)
    return b * keep


class LoraLayer:
    """Adapter state for one projection; a1 is (in, r), b's are (r, out)."""

    def __init__(self, a1: torch.Tensor, b1: torch.Tensor,
                 b2: Optional[torch.Tensor] = None, scale: float = 1.0,
                 frozen_identity: bool = False):
        if a1.shape[1] != b1.shape[0]:
            raise LoraError(f"rank mismatch: a1 {tuple(a1.shape)} vs b1 {tuple(b1.shape)}")
        if b2 is not None and b2.shape != b1.shape:
            raise LoraError(f"b2 shape {tuple(b2.shape)} != b1 shape {tuple(b1.shape)}")
        self.a1 = a1
        self.b1 = b1
        self.b2 = b2
        self.scale = scale
        self._frozen = frozen_identity

    @property
    def rank(self) -> int:
        return self.a1.shape[1]

    @property
    def in_dim(self) -> int:
        return self.a1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.b1.shape[1]

    @property
    def frozen_identity(self) -> bool:
        return self._frozen

    def freeze(self) -> None:
        """Permanently exclude a1/b1 from training; there is no unfreeze."""
        self._frozen = True
        self.a1.requires_grad_(False)
        self.b1.requires_grad_(False)

    def add_motion_coefficients(self) -> None:
        """Zero-initialized second coefficient matrix, so the augmented layer
        initially computes exactly what the frozen pair computed."""
        if self.b2 is not None:
            raise LoraError("layer already carries second-stage coefficients")
        self.b2 = torch.zeros_like(self.b1).requires_grad_(True)


def lora_init(in_dim: int, out_dim: int, rank: int,
              generator: torch.Generator, scale: float = 1.0) -> LoraLayer:
    """Fresh first-stage layer: a1 ~ N(0, 1/r), b1 = 0, so the initial
    effective update is exactly zero."""
    if rank < 1:
        raise LoraError(f"rank must be >= 1, got {rank}")
    if rank >= min(in_dim, out_dim):
        raise LoraError(
            f"rank {rank} is not low-rank for a {in_dim}x{out_dim} projection"
        )
    a1 = (torch.randn(in_dim, rank, generator=generator) * rank ** -0.5).requires_grad_(True)
    b1 = torch.zeros(rank, out_dim, requires_grad=True)
    return LoraLayer(a1=a1, b1=b1, scale=scale)


def lora_apply(w: torch.Tensor, layer: LoraLayer,
               dropout: Optional[DropoutSpec] = None,
               generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Materialized effective weight, ``w`` in (in, out) orientation.

    With a dropout spec (training only) each coefficient matrix gets an
    independent mask; without one this is the inference path.
    """
    if w.shape != (layer.in_dim, layer.out_dim):
        raise LoraError(
            f"weight shape {tuple(w.shape)} incompatible with adapter "
            f"({layer.in_dim}, {layer.out_dim})"
        )
    b1 = layer.b1
    b2 = layer.b2
    if dropout is not None:
        if generator is None:
            raise LoraError("dropout requires a generator")
        b1 = dropout_b(b1, dropout, generator)
        if b2 is not None:
            b2 = dropout_b(b2, dropout, generator)
    w_eff = w + layer.scale * (layer.a1 @ b1)
    if b2 is not None:
        w_eff = w_eff + layer.scale * (layer.a1 @ b2)
    return w_eff


class _Branch:
    """Per-forward low-rank residual for one projection."""

    __slots__ = ("a1", "b1", "b2", "scale")

    def __init__(self, a1, b1, b2, scale):
        self.a1 = a1
        self.b1 = b1
        self.b2 = b2
        self.scale = scale

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        h = x @ self.a1.to(x.dtype)
        y = (h @ self.b1.to(x.dtype)) * self.scale
        if self.b2 is not None:
            y = y + (h @ self.b2.to(x.dtype)) * self.scale
        return y


def _skippable(b: Optional[torch.Tensor]) -> bool:
    # zero coefficients contribute exactly nothing; skip them outside
    # training so a zeroed second stage is bitwise identical to stage 1
    # (only consulted under no-grad, where tracking does not matter)
    return b is not None and not bool(b.any())


class PreparedAdapters:
    """Adapter view handed to the backbone for one forward pass (or one
    training step, carrying that step's dropout masks)."""

    def __init__(self, branches: Dict[str, Optional[_Branch]],
                 learned_table: Optional[torch.Tensor]):
        self._branches = branches
        self._learned_table = learned_table

    def branch(self, name: str) -> Optional[_Branch]:
        return self._branches.get(name)

    @property
    def learned_table(self) -> Optional[torch.Tensor]:
        return self._learned_table


VT_SUFFIX = ".v"
UT_SUFFIX = ".u"


class AdapterBundle:
    """All personalization state for one or more concepts.

    Layers map adapted-projection names to LoraLayer objects; token rows hold
    the learned per-concept prompt embeddings ([v] appearance and [u] motion
    slots, zero-initialized); the stage marker tracks whether second-stage
    coefficients exist.
    """

    def __init__(self, layers: Dict[str, LoraLayer], concepts: List[dict],
                 token_rows: Dict[str, torch.Tensor], rank: int,
                 backbone: dict, stage: int = 1, scale: float = 1.0,
                 meta: Optional[dict] = None):
        ids = [c["id"] for c in concepts]
        if len(set(ids)) != len(ids):
            raise LoraError(f"duplicate concept ids: {ids}")
        self.layers = layers
        self.concepts = concepts
        self.token_rows = token_rows
        self.rank = rank
        self.scale = scale
        self.backbone = backbone
        self.stage = stage
        self.meta = dict(meta or {})
        self._validate()

    def _validate(self):
        for name, layer in self.layers.items():
            if layer.rank != self.rank:
                raise LoraError(f"layer {name} rank {layer.rank} != bundle rank {self.rank}")
            has_b2 = layer.b2 is not None
            if (self.stage == 2) != has_b2:
                raise LoraError(
                    f"stage marker {self.stage} inconsistent with b2 presence on {name}"
                )
        for c in self.concepts:
            for suffix in (VT_SUFFIX, UT_SUFFIX):
                if c["id"] + suffix not in self.token_rows:
                    raise LoraError(f"missing token row for concept {c['id']}{suffix}")

    # -- concept tokens -------------------------------------------------------

    def concept_index(self, concept_id: str) -> int:
        for i, c in enumerate(self.concepts):
            if c["id"] == concept_id:
                return i
        raise KeyError(concept_id)

    def slot(self, concept_id: str, kind: str) -> int:
        """Row index in the learned table: [v] rows are even, [u] rows odd."""
        if kind not in ("v", "u"):
            raise ValueError(f"token kind must be 'v' or 'u', got {kind!r}")
        return 2 * self.concept_index(concept_id) + (0 if kind == "v" else 1)

    def learned_table(self) -> torch.Tensor:
        rows = []
        for c in self.concepts:
            rows.append(self.token_rows[c["id"] + VT_SUFFIX])
            rows.append(self.token_rows[c["id"] + UT_SUFFIX])
        return torch.stack(rows)

    # -- training surface -----------------------------------------------------

    def adapter_params(self) -> Dict[str, torch.Tensor]:
        """Stage-specific trainable adapter tensors (keys name the matrices)."""
        params: Dict[str, torch.Tensor] = {}
        for name, layer in self.layers.items():
            if self.stage == 1:
                params[f"layers.{name}.a1"] = layer.a1
                params[f"layers.{name}.b1"] = layer.b1
            else:
                params[f"layers.{name}.b2"] = layer.b2
        return params

    def token_params(self) -> Dict[str, torch.Tensor]:
        suffix = VT_SUFFIX if self.stage == 1 else UT_SUFFIX
        return {
            f"tokens.{c['id']}{suffix}": self.token_rows[c["id"] + suffix]
            for c in self.concepts
        }

    def prepare(self, dropout: Optional[DropoutSpec] = None,
                generator: Optional[torch.Generator] = None) -> PreparedAdapters:
        """Forward-ready view; pass a dropout spec only on training steps.

        Masks are sampled independently per layer and per coefficient matrix,
        fresh on every call.
        """
        branches: Dict[str, Optional[_Branch]] = {}
        for name, layer in self.layers.items():
            b1, b2 = layer.b1, layer.b2
            if dropout is not None:
                if generator is None:
                    raise LoraError("dropout requires a generator")
                b1 = dropout_b(b1, dropout, generator)
                if b2 is not None:
                    b2 = dropout_b(b2, dropout, generator)
            elif not torch.is_grad_enabled():
                if _skippable(b2):
                    b2 = None
                if _skippable(b1) and b2 is None:
                    branches[name] = None
                    continue
            branches[name] = _Branch(layer.a1, b1, b2, layer.scale)
        return PreparedAdapters(branches, self.learned_table())

    # -- stage transition -----------------------------------------------------

    def start_stage2(self) -> "AdapterBundle":
        """Freeze the first-stage pair everywhere and add zeroed second-stage
        coefficients; records a fingerprint of the frozen tensors."""
        if self.stage != 1:
            raise LoraError("second stage already started")
        freeze_identity(self)
        for layer in self.layers.values():
            layer.add_motion_coefficients()
        for c in self.concepts:
            self.token_rows[c["id"] + VT_SUFFIX].requires_grad_(False)
            self.token_rows[c["id"] + UT_SUFFIX].requires_grad_(True)
        self.stage = 2
        self.meta["identity_fingerprint"] = self.identity_fingerprint()
        return self

    def identity_fingerprint(self) -> str:
        """sha256 over the frozen first-stage tensors, sorted by layer name."""
        h = hashlib.sha256()
        for name in sorted(self.layers):
            layer = self.layers[name]
            h.update(layer.a1.detach().contiguous().numpy().tobytes())
            h.update(layer.b1.detach().contiguous().numpy().tobytes())
        return h.hexdigest()


def freeze_identity(bundle: AdapterBundle) -> AdapterBundle:
    """Mark every layer's first-stage pair as fixed; gradients and optimizer
    state for them are dropped by construction afterwards."""
    for layer in bundle.layers.values():
        layer.freeze()
    return bundle


def create_bundle(layer_dims: Mapping[str, Tuple[int, int]], concepts: Sequence[dict],
                  rank: int, context_dim: int, backbone: dict,
                  generator: torch.Generator, scale: float = 1.0,
                  meta: Optional[dict] = None) -> AdapterBundle:
    """Fresh stage-1 bundle over the given adapted projections.

    ``concepts`` entries need an "id"; prompt template strings may ride
    along. Token rows start at zero, per the zero-initialized learned-token
    convention.
    """
    layers = {
        name: lora_init(dims[0], dims[1], rank, generator, scale)
        for name, dims in sorted(layer_dims.items())
    }
    token_rows = {}
    for c in concepts:
        token_rows[c["id"] + VT_SUFFIX] = torch.zeros(context_dim, requires_grad=True)
        token_rows[c["id"] + UT_SUFFIX] = torch.zeros(context_dim)
    return AdapterBundle(layers=layers, concepts=list(concepts), token_rows=token_rows,
                         rank=rank, backbone=backbone, scale=scale, meta=meta)


def compose(bundles: Sequence[AdapterBundle],
            generator: Optional[torch.Generator] = None) -> AdapterBundle:
    """Joint bundle for multiple concepts sharing one basis.

    A singleton compose is the identity. Otherwise the result is a fresh
    stage-1 bundle whose basis/coefficients are shared across all concepts
    (per-concept conditioning lives entirely in the prompt tokens) and must
    be trained jointly on the union of the concepts' data.
    """
    if not bundles:
        raise LoraError("nothing to compose")
    if len(bundles) == 1:
        return bundles[0]
    first = bundles[0]
    for b in bundles[1:]:
        if b.rank != first.rank:
            raise LoraError(f"rank mismatch: {b.rank} != {first.rank}")
        if b.backbone != first.backbone:
            raise LoraError("bundles target different backbone configs")
        if b.scale != first.scale:
            raise LoraError("bundles use different adapter scales")
    concepts = [dict(c) for b in bundles for c in b.concepts]
    layer_dims = {n: (l.in_dim, l.out_dim) for n, l in first.layers.items()}
    ctx = next(iter(first.token_rows.values())).shape[0]
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    return create_bundle(layer_dims, concepts, first.rank, ctx, first.backbone,
                         generator, first.scale)


# ---------------------------------------------------------------------------
# serialization


def save_adapter(path, bundle: AdapterBundle, extra_meta: Optional[dict] = None) -> None:
    tensors: Dict[str, torch.Tensor] = {}
    for name, layer in bundle.layers.items():
        tensors[f"layers.{name}.a1"] = layer.a1
        tensors[f"layers.{name}.b1"] = layer.b1
        if layer.b2 is not None:
            tensors[f"layers.{name}.b2"] = layer.b2
    for key, row in bundle.token_rows.items():
        tensors[f"tokens.{key}"] = row
    meta = {
        "kind": "adapter",
        "rank": bundle.rank,
        "scale": bundle.scale,
        "stage": bundle.stage,
        "concepts": bundle.concepts,
        "backbone": bundle.backbone,
        **bundle.meta,
        **(extra_meta or {}),
    }
    serialization.save_tensors(path, tensors, meta)


def load_adapter(path) -> AdapterBundle:
    tensors, meta = serialization.load_tensors(path)
    if meta.get("kind") != "adapter":
        raise serialization.CorruptArtifactError(f"{path}: not an adapter checkpoint")
    stage = meta["stage"]
    layer_parts: Dict[str, Dict[str, torch.Tensor]] = {}
    token_rows: Dict[str, torch.Tensor] = {}
    for name, tensor in tensors.items():
        if name.startswith("layers."):
            base, part = name[len("layers."):].rsplit(".", 1)
            layer_parts.setdefault(base, {})[part] = tensor
        elif name.startswith("tokens."):
            token_rows[name[len("tokens."):]] = tensor
        else:
            raise serialization.CorruptArtifactError(f"{path}: unexpected tensor {name!r}")
    layers = {}
    for name, parts in layer_parts.items():
        if "a1" not in parts or "b1" not in parts:
            raise serialization.CorruptArtifactError(f"{path}: layer {name} missing a1/b1")
        layer = LoraLayer(
            a1=parts["a1"], b1=parts["b1"], b2=parts.get("b2"),
            scale=meta.get("scale", 1.0), frozen_identity=stage == 2,
        )
        if stage == 1:
            layer.a1.requires_grad_(True)
            layer.b1.requires_grad_(True)
        elif layer.b2 is not None:
            layer.b2.requires_grad_(True)
        layers[name] = layer
    for key, row in token_rows.items():
        if (stage == 1) == key.endswith(VT_SUFFIX):
            row.requires_grad_(True)
    reserved = {"kind", "rank", "scale", "stage", "concepts", "backbone"}
    extra = {k: v for k, v in meta.items() if k not in reserved}
    return AdapterBundle(
        layers=layers, concepts=meta["concepts"], token_rows=token_rows,
        rank=meta["rank"], backbone=meta["backbone"], stage=stage,
        scale=meta.get("scale", 1.0), meta=extra,
    )
