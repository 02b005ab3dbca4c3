import torch

from ..base import VoiceLabCommand
from ...container import write_container
from ...core import FeatureBatch
from ...synthetic import load_bundle
from ...training import restore_converter


class Command(VoiceLabCommand):
    help = "Convert a source utterance to the voice of a target utterance."

    def add_arguments(self, parser):
        parser.add_argument("--ckpt", required=True)
        parser.add_argument("--source", required=True, help="Source utterance container.")
        parser.add_argument("--target", required=True, help="Target-speaker utterance container.")
        parser.add_argument("--out", required=True, help="Output container (mel, xattn_l*).")

    def execute_command(self, **options):
        converter, cfg = restore_converter(options["ckpt"])
        converter.eval()
        source, target = load_bundle(options["source"]), load_bundle(options["target"])

        with torch.no_grad():
            result = converter.convert(
                FeatureBatch.collate([source], cfg.temporal_multiple, cfg.dtype),
                FeatureBatch.collate([target], cfg.temporal_multiple, cfg.dtype),
            )
        arrays = {name: tensor[0].cpu().numpy() for name, tensor in result.named_arrays().items()}
        write_container(options["out"], arrays, attrs={
            "source_length": source.true_length,
            "padded_length": int(result.mel.shape[1]),
            "target_speaker": target.speaker_id,
        })
        self.stdout.write(self.style.SUCCESS(
            f"Converted {source.true_length} frames "
            f"(padded {result.mel.shape[1]}) to {options['out']}"
        ))
