from pathlib import Path

import numpy as np
import torch

from ..base import VoiceLabCommand
from ...container import write_container
from ...core import FeatureBatch
from ...synthetic import load_bundle
from ...training import restore_converter


def temporal_table(a_t: np.ndarray, gamma_t: int, level: int) -> np.ndarray:
    """(n, 1, gamma_t) weights laid out per frame of the padded utterance."""
    return np.repeat(a_t.reshape(-1), gamma_t ** (level - 1))


def channel_table(a_c: np.ndarray, gamma_c: int, level: int) -> np.ndarray:
    """(A, Cb, 1, gamma_c) weights as one row per temporal range over prenet channels."""
    rows = a_c.reshape(a_c.shape[0], -1)
    return np.repeat(rows, gamma_c ** (level - 1), axis=1)


class Command(VoiceLabCommand):
    help = "Dump the speaker-retrieval attention maps and representations of one utterance."

    def add_arguments(self, parser):
        parser.add_argument("--ckpt", required=True)
        parser.add_argument("--utt", required=True, help="Utterance container.")
        parser.add_argument("--out", required=True, help="Output container.")
        parser.add_argument("--tables", help="Directory for flat CSV tables for plotting.")

    def execute_command(self, **options):
        converter, cfg = restore_converter(options["ckpt"])
        converter.eval()
        batch = FeatureBatch.collate(
            [load_bundle(options["utt"])], cfg.temporal_multiple, cfg.dtype
        )
        with torch.no_grad():
            retrieval = converter.retrieve(batch.mel, batch.xvec, batch.lengths)
            averages = retrieval.time_averaged(batch.lengths)

        arrays = {name: t[0].cpu().numpy() for name, t in retrieval.named_arrays().items()}
        arrays.update({f"zavg{level}": avg[0].cpu().numpy()
                       for level, avg in enumerate(averages, start=1)})
        write_container(options["out"], arrays, attrs={
            "true_length": int(batch.lengths[0]),
            "padded_length": batch.frames,
            "frame_shift_ms": cfg.frame_shift_ms,
        })

        if options["tables"]:
            self.write_tables(Path(options["tables"]), arrays, cfg, retrieval.levels)
        self.stdout.write(self.style.SUCCESS(
            f"Wrote {len(arrays)} arrays for {retrieval.levels} levels to {options['out']}"
        ))

    def write_tables(self, tables: Path, arrays, cfg, levels: int):
        tables.mkdir(parents=True, exist_ok=True)
        for level in range(1, levels + 1):
            if f"a_t{level}" in arrays:
                weights = temporal_table(arrays[f"a_t{level}"], cfg.gamma_t, level)
                frames = np.arange(weights.size)
                np.savetxt(tables / f"a_t{level}.csv",
                           np.column_stack([frames, frames * cfg.frame_shift_ms, weights]),
                           delimiter=",", header="frame,time_ms,weight", comments="",
                           fmt=["%d", "%.6g", "%.8g"])
            if f"a_c{level}" in arrays:
                np.savetxt(tables / f"a_c{level}.csv",
                           channel_table(arrays[f"a_c{level}"], cfg.gamma_c, level),
                           delimiter=",", fmt="%.8g")
            np.savetxt(tables / f"zavg{level}.csv", arrays[f"zavg{level}"][None],
                       delimiter=",", fmt="%.8g")
