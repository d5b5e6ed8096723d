"""
Module
------
archmodel.py: 3D U-Net architecture arithmetic

Summary
-------
Data-level description of the 3D U-Net used for full-volume segmentation. Nothing is executed; the
descriptor is walked to propagate channels-first tensor shapes, count parameters under selectable counting
conventions and estimate activation memory.

Notes
-----
Convolutions use same-padding so 3x3x3 convolutions keep spatial size, and the output tile matches the
input tile. Analysis-path filters at resolution step s are base_filters * 2**(s-1).
"""
import itertools
import logging
from dataclasses import dataclass, field, asdict

import pandas as pd

from MISPar import config
from MISPar.exceptions import InvalidArch, ShapeError, ArchError, RangeError, InvalidCount

logger = logging.getLogger(__name__)

CONV, TRANSPOSED, POOL, CONCAT, BATCHNORM, RELU, SIGMOID = (
    'conv3d', 'transposed_conv3d', 'maxpool3d', 'concat', 'batchnorm', 'relu', 'sigmoid')
layerKinds = (CONV, TRANSPOSED, POOL, CONCAT, BATCHNORM, RELU, SIGMOID)
_weighted = (CONV, TRANSPOSED)
_axisNames = ('height', 'width', 'depth')

MAX_BYTES = 2 ** 63 - 1


@dataclass(frozen=True)
class TensorShape:
    """Channels-first shape (C, H, W, D)"""
    channels: int
    height: int
    width: int
    depth: int

    def __post_init__(self):
        for name in ('channels',) + _axisNames:
            if getattr(self, name) < 1:
                raise ShapeError('TensorShape', f'{name} must be >= 1, got {getattr(self, name)}')

    @property
    def spatial(self):
        return self.height, self.width, self.depth

    def elements(self):
        return self.channels * self.height * self.width * self.depth

    def as_tuple(self):
        return (self.channels,) + self.spatial

    def __str__(self):
        return 'x'.join(str(d) for d in self.as_tuple())


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: tuple = (1, 1, 1)
    stride: tuple = (1, 1, 1)
    out_filters: int = None
    bias_enabled: bool = False
    concat_source: int = None

    def __post_init__(self):
        if self.kind not in layerKinds:
            raise InvalidArch('LayerSpec', f'unknown layer kind {self.kind!r}')
        object.__setattr__(self, 'kernel', tuple(self.kernel))
        object.__setattr__(self, 'stride', tuple(self.stride))
        if self.kind == CONV and self.kernel not in ((3, 3, 3), (1, 1, 1)):
            raise InvalidArch('LayerSpec', f'conv3d kernel must be 3x3x3 or 1x1x1, got {self.kernel}')
        if self.kind in (POOL, TRANSPOSED) and (self.kernel != (2, 2, 2) or self.stride != (2, 2, 2)):
            raise InvalidArch('LayerSpec', f'{self.kind} needs a 2x2x2 kernel with stride 2')


@dataclass(frozen=True)
class ArchDescriptor:
    layers: tuple
    skip_links: tuple = ()
    resolution_steps: int = 4
    base_filters: int = 8
    in_channels: int = 4
    out_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, 'layers', tuple(self.layers))
        object.__setattr__(self, 'skip_links', tuple(tuple(link) for link in self.skip_links))
        if not self.layers:
            raise InvalidArch('ArchDescriptor', 'descriptor has no layers')
        for i, layer in enumerate(self.layers):
            if layer.kind == CONCAT and (layer.concat_source is None or not 0 <= layer.concat_source < i):
                raise InvalidArch('ArchDescriptor', f'layer {i} concat source must be an earlier layer')
        for source, target in self.skip_links:
            if not 0 <= source < target < len(self.layers) or self.layers[target].kind != CONCAT:
                raise InvalidArch('ArchDescriptor', f'skip link {source}->{target} does not end on a concat')

    def to_dict(self):
        """Plain-data form, suitable for YAML"""
        data = asdict(self)
        data['layers'] = [{k: list(v) if isinstance(v, tuple) else v for k, v in layer.items()}
                          for layer in data['layers']]
        data['skip_links'] = [list(link) for link in self.skip_links]
        return data

    @classmethod
    def from_dict(cls, data):
        layers = [LayerSpec(**layer) for layer in data['layers']]
        rest = {k: v for k, v in data.items() if k != 'layers'}
        return cls(layers=layers, **rest)


@dataclass(frozen=True)
class LayerParams:
    index: int
    kind: str
    weights: int = 0
    biases: int = 0
    bn_affine: int = 0
    bn_running: int = 0

    @property
    def total(self):
        return self.weights + self.biases + self.bn_affine + self.bn_running


@dataclass(frozen=True)
class ParamBreakdown:
    layers: tuple = field(default_factory=tuple)

    @property
    def weights(self):
        return sum(p.weights for p in self.layers)

    @property
    def biases(self):
        return sum(p.biases for p in self.layers)

    @property
    def bn_affine(self):
        return sum(p.bn_affine for p in self.layers)

    @property
    def bn_running(self):
        return sum(p.bn_running for p in self.layers)

    @property
    def total(self):
        return self.weights + self.biases + self.bn_affine + self.bn_running

    def summary(self):
        return {'weights': self.weights, 'biases': self.biases, 'bn_affine': self.bn_affine,
                'bn_running': self.bn_running, 'total': self.total}


def filters_at(step, base_filters=8):
    """Analysis-path filter count at resolution step ``step`` (1-based)"""
    return base_filters * 2 ** (step - 1)


def build_unet3d(base_filters=8, steps=4, in_channels=4, out_channels=1, bias=True, transposed_width='half'):
    """Build the 3D U-Net descriptor

    Analysis path: per step two 3x3x3 convolutions, each followed by batch normalisation and ReLU, with a
    2x2x2 max-pool between steps. Synthesis path: per transition a 2x2x2 stride-2 transposed convolution,
    concatenation with the encoder output of equal resolution, then two conv/bn/relu blocks. A 1x1x1
    convolution followed by a sigmoid produces the output mask.

    :param base_filters: filters at the first resolution step
    :type base_filters: int
    :param steps: resolution steps
    :type steps: int
    :param in_channels: input modalities
    :type in_channels: int
    :param out_channels: output channels
    :type out_channels: int
    :param bias: bias terms on convolutions (Optional, Default=True)
    :type bias: bool
    :param transposed_width: 'half' outputs the lower step's filter count, 'full' keeps the input width
    :type transposed_width: str
    :return: descriptor
    :rtype: ArchDescriptor
    """
    if steps < 2:
        raise InvalidArch('build_unet3d', f'a U-Net needs at least 2 resolution steps, got {steps}')
    if base_filters < 1 or in_channels < 1 or out_channels < 1:
        raise InvalidArch('build_unet3d', 'filter and channel counts must be positive')
    if transposed_width not in ('half', 'full'):
        raise InvalidArch('build_unet3d', f'transposed_width must be half or full, got {transposed_width!r}')

    layers = []
    encoder_out = {}

    def conv_block(filters):
        for _ in range(2):
            layers.append(LayerSpec(CONV, kernel=(3, 3, 3), out_filters=filters, bias_enabled=bias))
            layers.append(LayerSpec(BATCHNORM))
            layers.append(LayerSpec(RELU))

    for s in range(1, steps + 1):
        conv_block(filters_at(s, base_filters))
        if s < steps:
            encoder_out[s] = len(layers) - 1
            layers.append(LayerSpec(POOL, kernel=(2, 2, 2), stride=(2, 2, 2)))

    skip_links = []
    for s in range(steps - 1, 0, -1):
        f = filters_at(s, base_filters)
        up = f if transposed_width == 'half' else 2 * f
        layers.append(LayerSpec(TRANSPOSED, kernel=(2, 2, 2), stride=(2, 2, 2), out_filters=up, bias_enabled=bias))
        skip_links.append((encoder_out[s], len(layers)))
        layers.append(LayerSpec(CONCAT, concat_source=encoder_out[s]))
        conv_block(f)

    layers.append(LayerSpec(CONV, kernel=(1, 1, 1), out_filters=out_channels, bias_enabled=bias))
    layers.append(LayerSpec(SIGMOID))

    desc = ArchDescriptor(layers=layers, skip_links=skip_links, resolution_steps=steps,
                          base_filters=base_filters, in_channels=in_channels, out_channels=out_channels)
    check_unet_invariants(desc)
    return desc


def check_unet_invariants(desc):
    """Structural checks for a built U-Net: pool/transposed counts, skip links, filter doubling"""
    pools = [l for l in desc.layers if l.kind == POOL]
    ups = [l for l in desc.layers if l.kind == TRANSPOSED]
    transitions = desc.resolution_steps - 1
    if len(pools) != transitions or len(ups) != transitions:
        raise InvalidArch('check_unet_invariants',
                          f'expected {transitions} pools and transposed convs, got {len(pools)}/{len(ups)}')
    if len(desc.skip_links) != transitions:
        raise InvalidArch('check_unet_invariants', 'one skip link per resolution pair expected')
    step = 1
    for layer in desc.layers:
        if layer.kind == POOL:
            step += 1
        elif layer.kind == TRANSPOSED:
            break
        elif layer.kind == CONV:
            if layer.out_filters != filters_at(step, desc.base_filters):
                raise InvalidArch('check_unet_invariants', f'step {step} conv has {layer.out_filters} filters')
    return True


def encoder_filters(desc):
    """Filter count of each analysis-path step"""
    out, step_filters = [], None
    for layer in desc.layers:
        if layer.kind == TRANSPOSED:
            break
        if layer.kind == CONV:
            step_filters = layer.out_filters
        elif layer.kind == POOL:
            out.append(step_filters)
    out.append(step_filters)
    return out


def _channel_plan(desc, operation):
    """(in, out) channels per layer, resolved by walking the descriptor"""
    plan = []
    channels = desc.in_channels
    for i, layer in enumerate(desc.layers):
        c_in = channels
        if layer.kind in _weighted:
            if layer.out_filters is None or layer.out_filters < 1:
                raise ArchError(operation, f'layer {i} ({layer.kind}) has no output filter count')
            channels = layer.out_filters
        elif layer.kind == CONCAT:
            if layer.concat_source is None or not 0 <= layer.concat_source < len(plan):
                raise ArchError(operation, f'layer {i} concat source unresolved')
            channels = c_in + plan[layer.concat_source][1]
        plan.append((c_in, channels))
    return plan


def propagate_shapes(desc, input_shape):
    """Propagate a channels-first input shape through the descriptor

    :param desc: architecture
    :type desc: ArchDescriptor
    :param input_shape: input tile, e.g. TensorShape(4, 240, 240, 152)
    :type input_shape: TensorShape
    :return: output shape of every layer, and the final output shape
    :rtype: tuple[list[TensorShape], TensorShape]
    """
    shapes = []
    current = input_shape
    for i, layer in enumerate(desc.layers):
        if layer.kind == CONV:
            current = TensorShape(layer.out_filters, *current.spatial)
        elif layer.kind == POOL:
            for name, dim in zip(_axisNames, current.spatial):
                if dim % 2:
                    raise ShapeError('propagate_shapes',
                                     f'layer {i} ({layer.kind}): {name} dimension {dim} is not divisible by 2')
            current = TensorShape(current.channels, *(d // 2 for d in current.spatial))
        elif layer.kind == TRANSPOSED:
            current = TensorShape(layer.out_filters, *(d * 2 for d in current.spatial))
        elif layer.kind == CONCAT:
            source = shapes[layer.concat_source]
            if source.spatial != current.spatial:
                raise ShapeError('propagate_shapes',
                                 f'layer {i} (concat): spatial {current.spatial} does not match '
                                 f'layer {layer.concat_source} {source.spatial}')
            current = TensorShape(current.channels + source.channels, *current.spatial)
        shapes.append(current)
    return shapes, current


def count_params(desc, include_bn_running_stats=True):
    """Count parameters per layer

    conv3d: k^3 * C_in * C_out (+C_out bias); transposed conv: 2^3 * C_in * C_out (+bias);
    batchnorm: 2 * C scale/shift, plus 2 * C running mean/variance when counted.

    :param desc: architecture
    :type desc: ArchDescriptor
    :param include_bn_running_stats: count batchnorm running statistics
    :type include_bn_running_stats: bool
    :rtype: ParamBreakdown
    """
    rows = []
    for i, (layer, (c_in, c_out)) in enumerate(zip(desc.layers, _channel_plan(desc, 'count_params'))):
        if layer.kind in _weighted:
            k = layer.kernel[0] * layer.kernel[1] * layer.kernel[2]
            rows.append(LayerParams(i, layer.kind, weights=k * c_in * c_out,
                                    biases=c_out if layer.bias_enabled else 0))
        elif layer.kind == BATCHNORM:
            rows.append(LayerParams(i, layer.kind, bn_affine=2 * c_in,
                                    bn_running=2 * c_in if include_bn_running_stats else 0))
        else:
            rows.append(LayerParams(i, layer.kind))
    return ParamBreakdown(tuple(rows))


def trainable_params(desc=None):
    """Trainable parameter count, running statistics excluded (default descriptor when none given)"""
    desc = build_unet3d() if desc is None else desc
    return count_params(desc, include_bn_running_stats=False).total


def estimate_activation_memory(desc, input_shape, batch, bytes_per_element=4):
    """Upper-bound memory estimate for one replica

    batch * sum of every layer's output elements * bytes_per_element, plus the parameter bytes.

    :rtype: int
    """
    if isinstance(batch, bool) or batch < 1:
        raise InvalidCount('estimate_activation_memory', f'batch must be >= 1, got {batch}')
    if bytes_per_element < 1:
        raise InvalidCount('estimate_activation_memory', f'bytes_per_element must be >= 1, got {bytes_per_element}')
    shapes, _ = propagate_shapes(desc, input_shape)
    activations = sum(s.elements() for s in shapes)
    estimate = batch * activations * bytes_per_element + count_params(desc).total * bytes_per_element
    if estimate > MAX_BYTES:
        raise RangeError('estimate_activation_memory', f'estimate of {estimate} bytes overflows 64 bits')
    return estimate


def layer_table(desc, input_shape, include_bn_running_stats=True):
    """Layer table with columns layer, kind, output shape and params"""
    shapes, _ = propagate_shapes(desc, input_shape)
    params = count_params(desc, include_bn_running_stats)
    return pd.DataFrame({'layer': range(len(desc.layers)),
                         'kind': [l.kind for l in desc.layers],
                         'output_shape': [str(s) for s in shapes],
                         'params': [p.total for p in params.layers]})


def search_param_conventions(target=config.referenceParamTotal, base_filters=8, steps=4, in_channels=4, out_channels=1):
    """Enumerate counting conventions and rank their totals by distance to ``target``

    Toggles: bias on/off, batchnorm running statistics counted or not, transposed conv width half/full.

    :rtype: pd.DataFrame
    """
    rows = []
    for bias, running, width in itertools.product((True, False), (True, False), ('half', 'full')):
        desc = build_unet3d(base_filters, steps, in_channels, out_channels, bias=bias, transposed_width=width)
        total = count_params(desc, include_bn_running_stats=running).total
        rows.append({'bias': bias, 'running_stats': running, 'transposed_width': width,
                     'total': total, 'delta': total - target})
    table = pd.DataFrame(rows)
    table['distance'] = table['delta'].abs()
    table = table.sort_values(['distance', 'total'], kind='mergesort').drop(columns='distance')
    best = table.iloc[0]
    logger.info('closest convention to %d: bias=%s running_stats=%s width=%s total=%d (delta %+d)',
                target, best['bias'], best['running_stats'], best['transposed_width'], best['total'], best['delta'])
    return table.reset_index(drop=True)
