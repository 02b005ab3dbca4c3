from django.core.management.base import BaseCommand, CommandError

from ..core import ModelConfig, load_config
from ..exceptions import ConfigError, VoiceLabError


class VoiceLabCommand(BaseCommand):
    """Runs ``execute_command`` and reports domain errors as CommandError (exit 1)."""

    def handle(self, *args, **options):
        try:
            return self.execute_command(**options)
        except ConfigError as exc:
            raise CommandError("invalid configuration:\n  " + "\n  ".join(exc.errors)) from exc
        except VoiceLabError as exc:
            raise CommandError(f"{type(exc).__name__}: {exc}") from exc
        except FileNotFoundError as exc:
            raise CommandError(str(exc)) from exc

    def execute_command(self, **options):
        raise NotImplementedError

    @staticmethod
    def config_from(path) -> ModelConfig:
        return load_config(path) if path else ModelConfig()
