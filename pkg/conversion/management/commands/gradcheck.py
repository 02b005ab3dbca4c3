from ..base import VoiceLabCommand
from ...core import load_config, tiny_config
from ...training import eps_sweep, finite_difference_check


class Command(VoiceLabCommand):
    help = "Check analytic gradients of the total loss against central differences."

    def add_arguments(self, parser):
        parser.add_argument("--config", help="JSON/TOML config; the tiny config if omitted.")
        parser.add_argument("--eps", type=float, default=1e-5)
        parser.add_argument("--tolerance", type=float, default=1e-3)
        parser.add_argument("--coordinates", type=int, default=240)
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--sweep", action="store_true",
                            help="Also report the error for eps in 1e-4, 1e-5, 1e-6.")

    def execute_command(self, **options):
        cfg = load_config(options["config"]) if options["config"] else tiny_config()
        report = finite_difference_check(
            cfg, options["eps"], options["tolerance"],
            n_coordinates=options["coordinates"], seed=options["seed"],
        )
        self.stdout.write(
            f"checked {report.checked} coordinates over {report.groups} parameter groups; "
            f"max relative error {report.max_rel_error:.3e} at {report.group}"
            f"{list(report.coordinate)}"
        )
        if options["sweep"]:
            for eps, error in eps_sweep(cfg, n_coordinates=options["coordinates"],
                                        seed=options["seed"]).items():
                self.stdout.write(f"eps={eps:.0e} max_rel_error={error:.3e}")
        self.stdout.write(self.style.SUCCESS("gradient check passed"))
