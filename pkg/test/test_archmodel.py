from unittest import TestCase, mock

import numpy as np

from MISPar import config
from MISPar.archmodel import (TensorShape, LayerSpec, ArchDescriptor, build_unet3d, check_unet_invariants,
                              encoder_filters, propagate_shapes, count_params, trainable_params,
                              estimate_activation_memory, layer_table, search_param_conventions,
                              CONV, POOL, CONCAT, TRANSPOSED)
from MISPar.exceptions import InvalidArch, ShapeError, InvalidCount


class TestDescriptor(TestCase):

    def test_build_unet3d(self):
        desc = build_unet3d()
        self.assertTrue(check_unet_invariants(desc))
        self.assertEqual(encoder_filters(desc), [8, 16, 32, 64])
        self.assertEqual(len(desc.skip_links), 3)
        self.assertEqual(desc.layers[6].kind, POOL)
        self.assertEqual(desc.layers[-2].kernel, (1, 1, 1))

    def test_minimal_unet(self):
        desc = build_unet3d(8, 2, 1, 1)
        self.assertEqual(sum(l.kind == POOL for l in desc.layers), 1)
        self.assertEqual(sum(l.kind == TRANSPOSED for l in desc.layers), 1)
        self.assertEqual(len(desc.skip_links), 1)
        self.assertEqual(encoder_filters(desc), [8, 16])

    def test_build_checks_invariants(self):
        with mock.patch('MISPar.archmodel.check_unet_invariants', wraps=check_unet_invariants) as check:
            desc = build_unet3d(base_filters=4, steps=3)
        check.assert_called_once_with(desc)

    def test_invalid_layers(self):
        with self.assertRaises(InvalidArch):
            LayerSpec('dense')
        with self.assertRaises(InvalidArch):
            LayerSpec(CONV, kernel=(5, 5, 5), out_filters=8)
        with self.assertRaises(InvalidArch):
            LayerSpec(POOL, kernel=(2, 2, 2), stride=(1, 1, 1))
        with self.assertRaises(InvalidArch):
            ArchDescriptor(layers=[])
        with self.assertRaises(InvalidArch):
            ArchDescriptor(layers=[LayerSpec(CONCAT, concat_source=0)])
        with self.assertRaises(InvalidArch):
            build_unet3d(steps=1)

    def test_dict_form(self):
        desc = build_unet3d(base_filters=4, steps=3)
        self.assertEqual(ArchDescriptor.from_dict(desc.to_dict()), desc)


class TestShapes(TestCase):

    def test_propagate_shapes(self):
        shapes, output = propagate_shapes(build_unet3d(), TensorShape(4, 240, 240, 152))
        self.assertEqual(output.as_tuple(), (1, 240, 240, 152))
        self.assertEqual(shapes[6].as_tuple(), (8, 120, 120, 76))
        bottom = [s for s, l in zip(shapes, build_unet3d().layers) if l.kind == TRANSPOSED][0]
        self.assertEqual(bottom.as_tuple(), (32, 60, 60, 38))
        self.assertEqual(str(output), '1x240x240x152')

    def test_two_step_shape(self):
        _, output = propagate_shapes(build_unet3d(steps=2), TensorShape(4, 8, 8, 8))
        self.assertEqual(output.as_tuple(), (1, 8, 8, 8))

    def test_output_keeps_spatial_dims(self):
        rng = np.random.default_rng(5)
        for _ in range(12):
            steps = int(rng.integers(2, 5))
            out_channels = int(rng.integers(1, 4))
            desc = build_unet3d(base_filters=int(rng.integers(1, 9)), steps=steps,
                                in_channels=int(rng.integers(1, 5)), out_channels=out_channels)
            unit = 2 ** (steps - 1)
            dims = tuple(unit * int(m) for m in rng.integers(1, 4, size=3))
            _, output = propagate_shapes(desc, TensorShape(desc.in_channels, *dims))
            self.assertEqual(output.as_tuple(), (out_channels,) + dims)

    def test_odd_dimension(self):
        with self.assertRaises(ShapeError) as ctx:
            propagate_shapes(build_unet3d(), TensorShape(4, 240, 240, 155))
        self.assertEqual(ctx.exception.message, 'layer 6 (maxpool3d): depth dimension 155 is not divisible by 2')

    def test_tensor_shape(self):
        with self.assertRaises(ShapeError):
            TensorShape(4, 0, 240, 152)


class TestParams(TestCase):

    def test_count_params(self):
        breakdown = count_params(build_unet3d())
        self.assertEqual(breakdown.weights, 350696)
        self.assertEqual(breakdown.biases, 409)
        self.assertEqual(breakdown.bn_affine, 704)
        self.assertEqual(breakdown.bn_running, 704)
        self.assertEqual(breakdown.total, 352513)

    def test_conventions(self):
        self.assertEqual(trainable_params(), 351809)
        self.assertEqual(count_params(build_unet3d(bias=False)).total, 352104)
        self.assertEqual(count_params(build_unet3d(transposed_width='full')).total, 410361)
        self.assertEqual(count_params(build_unet3d(bias=False, transposed_width='full'), False).total, 409192)

    def test_search_param_conventions(self):
        table = search_param_conventions()
        self.assertEqual(len(table), 8)
        best = table.iloc[0]
        self.assertEqual(best['total'], 409192)
        self.assertEqual(best['delta'], 409192 - config.referenceParamTotal)
        self.assertEqual(best['transposed_width'], 'full')

    def test_layer_table(self):
        desc = build_unet3d()
        table = layer_table(desc, TensorShape(4, 240, 240, 152))
        self.assertEqual(len(table), len(desc.layers))
        self.assertEqual(table['params'].sum(), 352513)
        self.assertEqual(table['output_shape'].iloc[-1], '1x240x240x152')


class TestMemory(TestCase):

    def test_estimate_activation_memory(self):
        desc = ArchDescriptor(layers=[LayerSpec(CONV, out_filters=1)], in_channels=1)
        self.assertEqual(estimate_activation_memory(desc, TensorShape(1, 8, 8, 8), 2), 2 * 512 * 4 + 4)

    def test_estimate_scales_with_batch(self):
        desc = build_unet3d()
        tile = TensorShape(*config.deployment.tile)
        one = estimate_activation_memory(desc, tile, 1)
        two = estimate_activation_memory(desc, tile, 2)
        params = count_params(desc).total * 4
        self.assertEqual(two - params, 2 * (one - params))
        with self.assertRaises(InvalidCount):
            estimate_activation_memory(desc, tile, 0)

    def test_single_conv_layer(self):
        desc = ArchDescriptor(layers=[LayerSpec(CONV, kernel=(3, 3, 3), out_filters=8, bias_enabled=True)],
                              in_channels=4)
        self.assertEqual(count_params(desc).total, 27 * 4 * 8 + 8)
        estimate = estimate_activation_memory(desc, TensorShape(4, 240, 240, 152), 1)
        self.assertEqual(estimate - count_params(desc).total * 4, 280166400)

    def test_estimate_increases_with_every_dimension(self):
        desc = build_unet3d()
        base = estimate_activation_memory(desc, TensorShape(4, 16, 16, 16), 1)
        for dims in ((24, 16, 16), (16, 24, 16), (16, 16, 24)):
            self.assertGreater(estimate_activation_memory(desc, TensorShape(4, *dims), 1), base)
        self.assertGreater(estimate_activation_memory(desc, TensorShape(4, 16, 16, 16), 2), base)
