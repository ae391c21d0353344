"""Grouped-attention block, bottleneck stages, and full model assembly.

The attention block (``dgm_block``) recalibrates channels with a reduce ->
ReLU -> expand -> sigmoid branch of grouped 1x1 convolutions, multiplies the
input by the resulting (0, 1) weight map, and fuses with one more grouped
1x1 convolution. It preserves shape and can only shrink the input's
sup-norm.

The default desk-scale model is a stem followed by six bottleneck stages
and a 1x1 head stage; the attention block sits at S1, S4, S6, Conv1, whose
outputs also drive curriculum gating and feed a learned softmax fusion of
per-stage embeddings. All downsampling happens through 2x2 mean pooling
after a stride-1 depthwise convolution, so every convolution's output size
divides exactly.

Checkpoints are a JSON manifest (names, shapes, byte offsets) next to a raw
little-endian float32 blob; parameters are stored float32, so save/load
round-trips bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import (
    ConvSpec,
    Tensor,
    add,
    conv2d,
    hadamard,
    linear,
    pool2d,
    relu,
    reshape,
    sigmoid,
)
from .curriculum import FusionWeights, fuse_stages
from .errors import ConfigError, ShapeError

STAGE_VARIANTS = ("bottleneck1", "bottleneck2", "conv1x1")


@dataclass(frozen=True)
class DgmConfig:
    """Channel arithmetic of the attention block: C channels, reduce by r, G groups."""

    channels: int
    reduction: int = 4
    groups: int = 4

    def __post_init__(self):
        if self.reduction < 1:
            raise ConfigError(f"reduction must be >= 1, got {self.reduction}")
        if self.groups < 1:
            raise ConfigError(f"groups must be >= 1, got {self.groups}")
        if self.channels % self.groups:
            raise ConfigError(f"groups={self.groups} does not divide channels={self.channels}")
        if self.reduced % self.groups:
            raise ConfigError(
                f"groups={self.groups} does not divide reduced channels={self.reduced}"
            )

    @property
    def reduced(self) -> int:
        return max(1, self.channels // self.reduction)


@dataclass(frozen=True)
class StageSpec:
    """One named stage: block variant, output channels, stride, attention flag."""

    name: str
    variant: str
    channels: int
    stride: int = 1
    dgm: bool = False

    def __post_init__(self):
        if self.variant not in STAGE_VARIANTS:
            raise ConfigError(f"unknown stage variant {self.variant!r}")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.variant == "bottleneck2" and self.stride != 2:
            raise ConfigError("bottleneck2 is the downsampling variant; stride must be 2")
        if self.variant in ("bottleneck1", "conv1x1") and self.stride != 1:
            raise ConfigError(f"{self.variant} keeps spatial size; stride must be 1")
        if self.channels < 1:
            raise ConfigError(f"channels must be positive, got {self.channels}")


def default_stages() -> tuple[StageSpec, ...]:
    return (
        StageSpec("S1", "bottleneck1", 16, 1, dgm=True),
        StageSpec("S2", "bottleneck2", 24, 2),
        StageSpec("S3", "bottleneck1", 24, 1),
        StageSpec("S4", "bottleneck2", 48, 2, dgm=True),
        StageSpec("S5", "bottleneck1", 48, 1),
        StageSpec("S6", "bottleneck2", 96, 2, dgm=True),
        StageSpec("Conv1", "conv1x1", 128, 1, dgm=True),
    )


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to rebuild the network deterministically."""

    in_channels: int = 1
    input_size: int = 32
    stem_channels: int = 16
    stages: tuple[StageSpec, ...] = field(default_factory=default_stages)
    head_width: int = 128
    classes: int = 3
    groups: int = 4
    reduction: int = 4
    expansion: int = 4

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if self.classes < 1 or self.head_width < 1 or self.stem_channels < 1:
            raise ConfigError("classes, head_width and stem_channels must be positive")
        if not self.stages:
            raise ConfigError("model needs at least one stage")
        for st in self.stages:
            if st.dgm:
                DgmConfig(st.channels, self.reduction, self.groups)  # validates divisibility

    @property
    def dgm_stage_names(self) -> tuple[str, ...]:
        return tuple(st.name for st in self.stages if st.dgm)

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "input_size": self.input_size,
            "channels": self.stem_channels,
            "stages": [
                {"name": s.name, "variant": s.variant, "channels": s.channels,
                 "stride": s.stride, "dgm": s.dgm}
                for s in self.stages
            ],
            "head_width": self.head_width,
            "classes": self.classes,
            "groups": self.groups,
            "reduction": self.reduction,
            "expansion": self.expansion,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        stages = tuple(
            StageSpec(s["name"], s["variant"], s["channels"], s.get("stride", 1), s.get("dgm", False))
            for s in d.get("stages", [])
        ) or default_stages()
        return cls(
            in_channels=d.get("in_channels", 1),
            input_size=d.get("input_size", 32),
            stem_channels=d.get("channels", 16),
            stages=stages,
            head_width=d.get("head_width", 128),
            classes=d.get("classes", 3),
            groups=d.get("groups", 4),
            reduction=d.get("reduction", 4),
            expansion=d.get("expansion", 4),
        )


@dataclass(eq=False)
class DgmParams:
    """Weights of one attention block: reduce, expand, fuse grouped 1x1 convs."""

    reduce_w: Tensor
    reduce_b: Tensor
    expand_w: Tensor
    expand_b: Tensor
    fuse_w: Tensor
    fuse_b: Tensor


def _dgm_specs(cfg: DgmConfig) -> tuple[ConvSpec, ConvSpec, ConvSpec]:
    c, cr, g = cfg.channels, cfg.reduced, cfg.groups
    return (
        ConvSpec(c, cr, 1, groups=g),
        ConvSpec(cr, c, 1, groups=g),
        ConvSpec(c, c, 1, groups=g),
    )


def dgm_weight_map(x: Tensor, cfg: DgmConfig, params: DgmParams) -> Tensor:
    """The block's internal gate: sigmoid(expand(relu(reduce(x)))), in (0, 1)."""
    spec_r, spec_e, _ = _dgm_specs(cfg)
    h = relu(conv2d(x, params.reduce_w, params.reduce_b, spec_r))
    return sigmoid(conv2d(h, params.expand_w, params.expand_b, spec_e))


def dgm_block(x: Tensor, cfg: DgmConfig, params: DgmParams) -> Tensor:
    """Shape-preserving channel recalibration: fuse(x * weight_map(x))."""
    _, _, spec_f = _dgm_specs(cfg)
    weighted = hadamard(x, dgm_weight_map(x, cfg, params))
    return conv2d(weighted, params.fuse_w, params.fuse_b, spec_f)


@dataclass(eq=False)
class BottleneckParams:
    expand_w: Tensor
    expand_b: Tensor
    dw_w: Tensor
    dw_b: Tensor
    project_w: Tensor
    project_b: Tensor
    in_channels: int
    out_channels: int
    hidden: int


def linear_bottleneck(x: Tensor, spec: StageSpec, params: BottleneckParams) -> Tensor:
    """Inverted bottleneck: expand 1x1 -> depthwise 3x3 -> project 1x1 (linear).

    The stride-2 variant downsamples with a 2x2 mean pool between the
    depthwise and projection convs; the stride-1 variant adds a residual
    when input and output widths match.
    """
    cin, cout, e = params.in_channels, params.out_channels, params.hidden
    h = relu(conv2d(x, params.expand_w, params.expand_b, ConvSpec(cin, e, 1)))
    h = relu(conv2d(h, params.dw_w, params.dw_b, ConvSpec(e, e, 3, padding=1, groups=e)))
    if spec.stride == 2:
        h = pool2d(h, "mean", 2)
    h = conv2d(h, params.project_w, params.project_b, ConvSpec(e, cout, 1))
    if spec.variant == "bottleneck1" and cin == cout:
        h = add(h, x)
    return h


class Model:
    """The assembled network: stem, stages, per-stage fusion, linear head.

    Parameters live in an insertion-ordered name -> Tensor mapping; names are
    hierarchical (``S4.dgm.reduce.w``, ``proj.S6.w``, ``fusion.scores``), which
    is what stage-wise freezing and checkpointing key on.
    """

    def __init__(self, spec: ModelSpec, seed: int):
        self.spec = spec
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)
        self._build()

    # -- construction -------------------------------------------------

    def _he_uniform(self, shape, fan_in: int, name: str) -> Tensor:
        bound = float(np.sqrt(6.0 / fan_in))
        data = self._rng.uniform(-bound, bound, size=shape).astype(np.float32)
        return self._register(Tensor(data, requires_grad=True, name=name), name)

    def _zeros(self, shape, name: str) -> Tensor:
        return self._register(
            Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True, name=name), name
        )

    def _register(self, t: Tensor, name: str) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self.params[name] = t
        return t

    def _conv_pair(self, prefix: str, spec: ConvSpec) -> tuple[Tensor, Tensor]:
        fan_in = (spec.in_channels // spec.groups) * spec.kernel**2
        w = self._he_uniform(
            (spec.out_channels, spec.in_channels // spec.groups, spec.kernel, spec.kernel),
            fan_in, f"{prefix}.w",
        )
        b = self._zeros((spec.out_channels,), f"{prefix}.b")
        return w, b

    def _build(self):
        sp = self.spec
        self._conv_audit: list[tuple[str, ConvSpec]] = []

        def conv_pair(prefix, cspec):
            self._conv_audit.append((prefix, cspec))
            return self._conv_pair(prefix, cspec)

        stem_spec = ConvSpec(sp.in_channels, sp.stem_channels, 3, padding=1)
        self._stem = conv_pair("stem", stem_spec) + (stem_spec,)

        c = sp.stem_channels
        self._blocks: list[tuple[StageSpec, object, Optional[tuple[DgmConfig, DgmParams]]]] = []
        for st in sp.stages:
            if st.variant == "conv1x1":
                cspec = ConvSpec(c, st.channels, 1)
                block = conv_pair(f"{st.name}.conv", cspec) + (cspec,)
            else:
                e = sp.expansion * c
                ew, eb = conv_pair(f"{st.name}.expand", ConvSpec(c, e, 1))
                dw, db = conv_pair(f"{st.name}.dw", ConvSpec(e, e, 3, padding=1, groups=e))
                pw, pb = conv_pair(f"{st.name}.project", ConvSpec(e, st.channels, 1))
                block = BottleneckParams(ew, eb, dw, db, pw, pb, c, st.channels, e)
            dgm = None
            if st.dgm:
                cfg = DgmConfig(st.channels, sp.reduction, sp.groups)
                names = ("reduce", "expand", "fuse")
                tensors = []
                for nm, cs in zip(names, _dgm_specs(cfg)):
                    tensors.extend(conv_pair(f"{st.name}.dgm.{nm}", cs))
                dgm = (cfg, DgmParams(*tensors))
            self._blocks.append((st, block, dgm))
            c = st.channels

        for name in sp.dgm_stage_names:
            width = next(st.channels for st in sp.stages if st.name == name)
            self._he_uniform((width, sp.head_width), width, f"proj.{name}.w")
            self._zeros((sp.head_width,), f"proj.{name}.b")
        self._fusion_scores = self._zeros((len(sp.dgm_stage_names),), "fusion.scores")
        self._head_w = self._he_uniform((sp.head_width, sp.classes), sp.head_width, "head.w")
        self._head_b = self._zeros((sp.classes,), "head.b")

    # -- inspection ----------------------------------------------------

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def conv_audit(self) -> list[tuple[str, ConvSpec, int]]:
        """(name, spec, allocated weight count) for every convolution."""
        return [
            (name, cspec, self.params[f"{name}.w"].size) for name, cspec in self._conv_audit
        ]

    def dgm_branch_weight_count(self) -> int:
        """Total weight elements (biases excluded) in the attention branches."""
        return sum(
            self.params[f"{name}.w"].size
            for name, _ in self._conv_audit
            if ".dgm." in name
        )

    def dgm_parameter_names(self, stage: str) -> list[str]:
        return [n for n in self.params if n.startswith(f"{stage}.dgm.")]

    @property
    def fusion_scores(self) -> Tensor:
        return self._fusion_scores

    # -- execution ------------------------------------------------------

    def forward(self, batch) -> tuple[Tensor, dict[str, Tensor]]:
        """Returns (logits, {stage name: feature map}) for the gated stages."""
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=np.float32))
        if x.data.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"expected (N, {self.spec.in_channels}, H, W) input, got {x.shape}"
            )
        stem_w, stem_b, stem_spec = self._stem
        h = relu(conv2d(x, stem_w, stem_b, stem_spec))
        h = pool2d(h, "mean", 2)

        features: dict[str, Tensor] = {}
        for st, block, dgm in self._blocks:
            if st.variant == "conv1x1":
                w, b, cspec = block
                h = relu(conv2d(h, w, b, cspec))
            else:
                h = linear_bottleneck(h, st, block)
            if dgm is not None:
                cfg, params = dgm
                h = dgm_block(h, cfg, params)
                features[st.name] = h

        vecs: dict[str, Tensor] = {}
        for name in self.spec.dgm_stage_names:
            f = features[name]
            g = pool2d(f, "global_avg")
            g = reshape(g, (f.shape[0], f.shape[1]))
            vecs[name] = linear(g, self.params[f"proj.{name}.w"], self.params[f"proj.{name}.b"])
        fused = fuse_stages(vecs, FusionWeights(self.spec.dgm_stage_names, self._fusion_scores))
        logits = linear(fused, self._head_w, self._head_b)
        return logits, features

    def weight_maps(self, batch) -> dict[str, np.ndarray]:
        """The internal attention gates per stage, for interpretability dumps."""
        x = Tensor(np.asarray(batch, dtype=np.float32))
        stem_w, stem_b, stem_spec = self._stem
        h = relu(conv2d(x, stem_w, stem_b, stem_spec))
        h = pool2d(h, "mean", 2)
        maps: dict[str, np.ndarray] = {}
        for st, block, dgm in self._blocks:
            if st.variant == "conv1x1":
                w, b, cspec = block
                h = relu(conv2d(h, w, b, cspec))
            else:
                h = linear_bottleneck(h, st, block)
            if dgm is not None:
                cfg, params = dgm
                maps[st.name] = dgm_weight_map(h, cfg, params).data.copy()
                h = dgm_block(h, cfg, params)
        return maps

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- state ------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            arr = np.asarray(arrays[name], dtype=np.float32)
            if arr.shape != p.data.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()


def build_model(spec: ModelSpec, seed: int) -> Model:
    """Deterministic construction; the same (spec, seed) gives identical weights."""
    return Model(spec, seed)


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + raw little-endian float32 blob
# ---------------------------------------------------------------------------


def save_checkpoint(model: Model, prefix, extra: Optional[dict] = None) -> None:
    """Write ``<prefix>.json`` (manifest) and ``<prefix>.bin`` (float32 blob)."""
    entries, chunks, offset = [], [], 0
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(p.data.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"spec": model.spec.to_dict(), "tensors": entries, "extra": extra or {}}
    Path(str(prefix) + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    Path(str(prefix) + ".bin").write_bytes(b"".join(chunks))


def load_checkpoint(prefix) -> tuple[Model, dict]:
    """Rebuild the model recorded at ``prefix`` and return (model, extra)."""
    manifest = json.loads(Path(str(prefix) + ".json").read_text())
    blob = Path(str(prefix) + ".bin").read_bytes()
    spec = ModelSpec.from_dict(manifest["spec"])
    model = Model(spec, seed=0)
    arrays = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape)
        arrays[entry["name"]] = arr
    model.load_state_arrays(arrays)
    return model, manifest.get("extra", {})
