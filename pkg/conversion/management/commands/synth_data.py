from ..base import VoiceLabCommand
from ...synthetic import save_corpus, synth_corpus


class Command(VoiceLabCommand):
    help = "Generate a synthetic feature corpus of seeded speakers."

    def add_arguments(self, parser):
        parser.add_argument("--speakers", type=int, required=True)
        parser.add_argument("--utts", type=int, required=True, help="Utterances per speaker.")
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--out", required=True, help="Output corpus directory.")
        parser.add_argument("--config", help="JSON/TOML model config giving feature widths.")
        parser.add_argument("--min-len", type=int, default=96, help="Shortest utterance, frames.")
        parser.add_argument("--max-len", type=int, default=160, help="Longest utterance, frames.")

    def execute_command(self, **options):
        corpus = synth_corpus(
            options["speakers"],
            options["utts"],
            len_range=(options["min_len"], options["max_len"]),
            seed=options["seed"],
            cfg=self.config_from(options["config"]),
        )
        out = save_corpus(corpus, options["out"])
        self.stdout.write(
            self.style.SUCCESS(f"Wrote {len(corpus)} utterances of {len(corpus.speakers)} "
                               f"speakers to {out}")
        )
