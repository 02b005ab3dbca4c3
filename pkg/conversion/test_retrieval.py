import itertools
import random

import torch
from django.test import SimpleTestCase

from conversion.core import ModelConfig, seeded, tiny_config
from conversion.exceptions import ConfigMismatch, DimensionMismatch, DivisibilityError
from conversion.retrieval import (
    ConvSpeakerModule,
    EmbeddingSpeakerModule,
    SpeakerRetrieval,
    TcrBlock,
    build_speaker_module,
    channel_segmentation,
    mtcr_forward,
    tcr_block_forward,
    temporal_segmentation,
)


def build(cfg: ModelConfig) -> SpeakerRetrieval:
    with seeded(cfg.seed):
        return SpeakerRetrieval(cfg).to(cfg.dtype)


class SegmentationTests(SimpleTestCase):
    def setUp(self) -> None:
        self.h = torch.arange(2 * 8 * 6, dtype=torch.float64).reshape(2, 8, 6)

    def test_temporal_segments_are_consecutive_rows(self) -> None:
        segments = temporal_segmentation(self.h, 4)
        self.assertEqual(tuple(segments.shape), (2, 2, 4, 6))
        self.assertTrue(torch.equal(segments[:, 1, 2], self.h[:, 6]))
        self.assertTrue(torch.equal(segments.reshape(self.h.shape), self.h))

    def test_channel_cells_index_layout(self) -> None:
        cells = channel_segmentation(self.h, 3, 2)
        self.assertEqual(tuple(cells.shape), (2, 4, 2, 3, 2))
        for a, b, i, j in itertools.product(range(4), range(2), range(3), range(2)):
            self.assertEqual(cells[1, a, b, i, j], self.h[1, a * 2 + j, b * 3 + i])

    def test_channel_cells_invert_exactly(self) -> None:
        cells = channel_segmentation(self.h, 2, 4)
        restored = cells.movedim(-1, -3).reshape(self.h.shape)
        self.assertTrue(torch.equal(restored, self.h))

    def test_indivisible_lengths(self) -> None:
        with self.assertRaises(DivisibilityError):
            temporal_segmentation(self.h, 3)
        with self.assertRaises(DivisibilityError):
            channel_segmentation(self.h, 4, 2)
        with self.assertRaises(DivisibilityError):
            channel_segmentation(self.h, 2, 3)


class SpeakerRetrievalShapeTests(SimpleTestCase):
    def setUp(self) -> None:
        self.cfg = ModelConfig()
        self.module = build(self.cfg)
        generator = torch.Generator().manual_seed(0)
        self.mel = torch.randn(1, 128, 80, generator=generator)
        self.xvec = torch.randn(1, 192, generator=generator)

    def test_level_shapes_at_default_config(self) -> None:
        output = self.module(self.mel, self.xvec)
        self.assertEqual(tuple(output.z0.shape), (1, 128, 256))
        self.assertEqual([tuple(z.shape[1:]) for z in output.z], [(32, 64), (8, 16), (2, 4)])
        self.assertEqual(
            [tuple(a.shape) for a in output.a_t],
            [(1, 32, 1, 4), (1, 8, 1, 4), (1, 2, 1, 4)],
        )
        self.assertEqual(
            [tuple(a.shape) for a in output.a_c],
            [(1, 2, 64, 1, 4), (1, 2, 16, 1, 4), (1, 2, 4, 1, 4)],
        )

    def test_indivisible_length_names_multiple(self) -> None:
        with self.assertRaises(DivisibilityError) as ctx:
            self.module(self.mel[:, :100], self.xvec)
        self.assertIn("64", str(ctx.exception))

    def test_wrong_xvec_width(self) -> None:
        with self.assertRaises(DimensionMismatch):
            self.module(self.mel, torch.randn(1, 10))

    def test_named_arrays(self) -> None:
        names = set(self.module(self.mel, self.xvec).named_arrays())
        self.assertEqual(
            names, {"z0", "z1", "z2", "z3", "a_t1", "a_t2", "a_t3", "a_c1", "a_c2", "a_c3"}
        )

    def test_row_mask_follows_start_frames(self) -> None:
        output = self.module(torch.cat([self.mel, self.mel]), torch.cat([self.xvec] * 2))
        mask = output.row_mask(1, torch.tensor([100, 128]))
        self.assertEqual(mask.sum(dim=1).tolist(), [25, 32])
        self.assertEqual(output.row_mask(3, torch.tensor([64, 65])).sum(dim=1).tolist(), [1, 2])

    def test_retrieval_is_differentiable(self) -> None:
        output = self.module(self.mel, self.xvec)
        sum(z.sum() for z in output.z).backward()
        block = self.module.blocks[0]
        self.assertGreater(float(block.temporal_query.weight.grad.norm()), 0.0)
        self.assertGreater(float(block.channel_query.weight.grad.norm()), 0.0)
        self.assertGreater(float(self.module.prenet.lift.weight.grad.norm()), 0.0)


class AttentionNormalizationTests(SimpleTestCase):
    def test_weights_normalized_over_random_configs(self) -> None:
        rng = random.Random(7)
        for trial in range(300):
            n_blocks = rng.randint(1, 3)
            gamma_c = rng.randint(1, 3)
            cfg = ModelConfig(
                mel_dim=3,
                xvec_dim=3,
                prenet_channels=gamma_c**n_blocks * rng.randint(1, 2),
                n_tcr_blocks=n_blocks,
                gamma_t=rng.randint(1, 3),
                gamma_c=gamma_c,
                gamma_tr=tuple(rng.randint(1, 3) for _ in range(n_blocks)),
                precision="float64",
                seed=trial,
            )
            module = build(cfg)
            frames = cfg.retrieval_multiple * rng.randint(1, 2)
            mel = torch.randn(2, frames, 3, dtype=torch.float64) * 5
            output = module(mel, torch.randn(2, 3, dtype=torch.float64))
            for a in output.a_t + output.a_c:
                self.assertTrue(torch.all(a >= 0))
                self.assertLess(float((a.sum(-1) - 1).abs().max()), 1e-6)


class UniformAttentionTests(SimpleTestCase):
    def setUp(self) -> None:
        self.cfg = tiny_config(prenet_channels=16).with_ablation(
            uniform_temporal_attn=(True, True), uniform_channel_attn=(True, True)
        )
        with seeded(3):
            self.block = TcrBlock(self.cfg, 1).double()

    def test_uniform_block_is_blocked_mean_of_convolved_map(self) -> None:
        generator = torch.Generator().manual_seed(11)
        for _ in range(20):
            z_prev = torch.randn(1, 16, 16, generator=generator, dtype=torch.float64)
            xvec = torch.randn(1, 4, generator=generator, dtype=torch.float64)
            z, a_t, a_c = tcr_block_forward(z_prev, xvec, self.block, self.cfg, 1)
            h_t = self.block.conv(z_prev)[0]
            self.assertEqual(tuple(z.shape), (1, 8, 8))
            for r, b in itertools.product(range(8), range(8)):
                expected = h_t[2 * r:2 * r + 2, 2 * b:2 * b + 2].mean()
                self.assertAlmostEqual(float(z[0, r, b]), float(expected), places=10)
            self.assertTrue(torch.all(a_t == 0.5))
            self.assertTrue(torch.all(a_c == 0.5))

    def test_block_forward_matches_helper(self) -> None:
        z_prev = torch.randn(1, 16, 16, dtype=torch.float64)
        xvec = torch.randn(1, 4, dtype=torch.float64)
        z, _, _ = self.block(z_prev, xvec)
        expected, _, _ = tcr_block_forward(z_prev, xvec, self.block, self.cfg, 1)
        self.assertTrue(torch.equal(z, expected))


class SpeakerModuleVariantTests(SimpleTestCase):
    def setUp(self) -> None:
        self.cfg = tiny_config()
        self.mel = torch.randn(2, 8, self.cfg.mel_dim, dtype=torch.float64)
        self.xvec = torch.randn(2, self.cfg.xvec_dim, dtype=torch.float64)

    def test_single_active_block(self) -> None:
        cfg = self.cfg.with_ablation(active_blocks=1)
        output = mtcr_forward(self.mel, self.xvec, build(cfg), cfg)
        self.assertEqual(output.levels, 1)
        self.assertEqual(tuple(output.z[0].shape), (2, 4, 4))

    def test_level_count_must_match_config(self) -> None:
        module = build(self.cfg)
        with self.assertRaises(ConfigMismatch):
            mtcr_forward(self.mel, self.xvec, module, self.cfg.with_ablation(active_blocks=1))

    def test_embedding_variant_has_one_row_per_level(self) -> None:
        cfg = self.cfg.with_ablation(speaker_module="sv")
        with seeded(0):
            module = build_speaker_module(cfg).double()
        self.assertIsInstance(module, EmbeddingSpeakerModule)
        output = mtcr_forward(self.mel, self.xvec, module, cfg)
        self.assertEqual([tuple(z.shape) for z in output.z], [(2, 1, 4), (2, 1, 2)])
        self.assertEqual(output.a_t, [])
        self.assertIsNone(output.z0)
        self.assertEqual(output.row_mask(2, torch.tensor([3, 8])).tolist(), [[True], [True]])

    def test_seeded_build_is_reproducible(self) -> None:
        first, second = build(self.cfg), build(self.cfg)
        a = first(self.mel, self.xvec)
        b = second(self.mel, self.xvec)
        for za, zb in zip(a.z, b.z):
            self.assertTrue(torch.equal(za, zb))

    def test_conv_variant_pools_each_level(self) -> None:
        cfg = self.cfg.with_ablation(speaker_module="conv")
        with seeded(0):
            module = build_speaker_module(cfg).double()
        self.assertIsInstance(module, ConvSpeakerModule)
        output = mtcr_forward(self.mel, self.xvec, module, cfg)
        self.assertEqual([tuple(z.shape) for z in output.z], [(2, 4, 4), (2, 2, 2)])
        self.assertEqual([tuple(a.shape) for a in output.a_t], [(2, 4, 1, 2), (2, 2, 1, 2)])
        self.assertTrue(all(torch.all(a == 0.5) for a in output.a_t))
        self.assertEqual(output.a_c, [])
        self.assertEqual(set(output.named_arrays()), {"z0", "z1", "z2", "a_t1", "a_t2"})

        other = mtcr_forward(self.mel, self.xvec * 3 + 1, module, cfg)
        self.assertTrue(torch.equal(output.z[1], other.z[1]))

    def test_conv_variant_ignores_frames_past_length(self) -> None:
        cfg = self.cfg.with_ablation(speaker_module="conv")
        with seeded(0):
            module = build_speaker_module(cfg).double()
        lengths = torch.tensor([3, 8])
        noisy = self.mel.clone()
        noisy[0, 3:] = 100.0
        first = mtcr_forward(self.mel, self.xvec, module, cfg, lengths)
        second = mtcr_forward(noisy, self.xvec, module, cfg, lengths)
        for za, zb in zip(first.z, second.z):
            self.assertTrue(torch.equal(za, zb))


class XvecScalingTests(SimpleTestCase):
    def test_positive_scaling_keeps_every_argmax(self) -> None:
        cfg = tiny_config()
        generator = torch.Generator().manual_seed(5)
        with seeded(2):
            block = TcrBlock(cfg, 1).double()
        for scale in (0.25, 3.0, 40.0):
            for _ in range(10):
                z_prev = torch.randn(2, 8, 8, generator=generator, dtype=torch.float64)
                xvec = torch.randn(2, 4, generator=generator, dtype=torch.float64)
                _, a_t, a_c = tcr_block_forward(z_prev, xvec, block, cfg, 1)
                _, b_t, b_c = tcr_block_forward(z_prev, xvec * scale, block, cfg, 1)
                self.assertTrue(torch.equal(a_t.argmax(-1), b_t.argmax(-1)))
                self.assertTrue(torch.equal(a_c.argmax(-1), b_c.argmax(-1)))
                self.assertFalse(torch.allclose(a_t, b_t))

    def test_first_level_maps_keep_argmax_through_module(self) -> None:
        cfg = tiny_config()
        module = build(cfg)
        mel = torch.randn(3, 16, cfg.mel_dim, dtype=torch.float64)
        xvec = torch.randn(3, cfg.xvec_dim, dtype=torch.float64)
        base = mtcr_forward(mel, xvec, module, cfg)
        scaled = mtcr_forward(mel, xvec * 7.5, module, cfg)
        self.assertTrue(torch.equal(base.a_t[0].argmax(-1), scaled.a_t[0].argmax(-1)))
        self.assertTrue(torch.equal(base.a_c[0].argmax(-1), scaled.a_c[0].argmax(-1)))
