"""Error categories shared across fewshotlib.

Every module raises its own specific exception types, declared next to the code that
raises them. Each of those subclasses one of the categories below, and each category
carries the exit code the command-line interface reports for it.

Classes:
    FewShotError: Root of all library errors.
    ConfigurationError: Invalid configuration or an infeasible request (exit code 2).
    DataError: Malformed manifests, feature files, checkpoints or IO failures (exit code 3).
    NumericalError: Shape mismatches, non-finite values, degenerate embeddings (exit code 4).

Example:
    Map any library failure to a process exit code::

        from fewshotlib.exceptions import FewShotError

        try:
            run_training(config)
        except FewShotError as exc:
            raise SystemExit(exc.exit_code) from exc

.. versionadded:: 0.1.0
"""


class FewShotError(Exception):
    """Base class for every error raised by fewshotlib."""

    exit_code: int = 1


class ConfigurationError(FewShotError):
    """Raised when a configuration value or a requested task cannot be honored.

    Covers unknown config keys, out-of-range hyperparameters, episode specs that the
    corpus cannot satisfy, and fine-tuning variants that do not apply to the episode shape.

    .. versionadded:: 0.1.0
    """

    exit_code = 2


class DataError(FewShotError):
    """Raised when on-disk data is missing, unreadable or malformed.

    .. versionadded:: 0.1.0
    """

    exit_code = 3


class NumericalError(FewShotError):
    """Raised on dimension mismatches and numerically invalid states (NaN/Inf, zero norms).

    .. versionadded:: 0.1.0
    """

    exit_code = 4
