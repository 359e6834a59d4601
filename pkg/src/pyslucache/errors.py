"""Exception types raised across pyslucache."""


class SluCacheError(Exception):
    """Base class of every pyslucache error"""


class InputTooShort(SluCacheError, ValueError):
    """Waveform shorter than one analysis window"""


class InvalidAudio(SluCacheError, ValueError):
    """Waveform holds non-finite samples or an invalid sample rate"""


class InvalidFilter(SluCacheError, ValueError):
    """Sinc filter cutoffs out of order or outside (0, Nyquist)"""


class ShapeError(SluCacheError, ValueError):
    """Tensor or feature dimensions do not compose"""


class NonFiniteValue(SluCacheError, ValueError):
    """A tensor operation produced NaN or Inf"""


class NoGraph(SluCacheError, RuntimeError):
    """backward() called on a value with no recorded computation"""


class Infeasible(SluCacheError, ValueError):
    """No alignment of the posteriors collapses to the target (probability exactly 0)"""


class OracleTooLarge(SluCacheError, ValueError):
    """Brute-force path enumeration would exceed its size guard"""


class BadPreload(SluCacheError, ValueError):
    """Malformed cache warm-up file"""


class NotInManifest(SluCacheError, KeyError):
    """Offloaded utterance unknown to the simulated cloud"""


class LexiconMiss(SluCacheError, ValueError):
    """Transcript token missing from the lexicon, or empty transcript"""


class TrainingDiverged(SluCacheError, RuntimeError):
    """Finetuning produced a non-finite loss; the model was rolled back"""


class InfeasibleSetting(SluCacheError, ValueError):
    """Benchmark setting cannot be built from the given manifest"""


class InvariantViolation(SluCacheError, RuntimeError):
    """Cache store or report aggregates disagree with their own bookkeeping"""
