"""Glucose forecasting from CGM, meal, insulin and activity records.

Pipeline: :mod:`ingest` -> :mod:`kalman` (optional fault correction) ->
:mod:`features` -> :mod:`train` / :mod:`nn` -> :mod:`evaluate`.
:mod:`synth` produces seeded synthetic patients for testing.
"""

__version__ = "0.1.0"
