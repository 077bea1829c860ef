"""Record experiment runs, then add logging statements after the fact.

Scripts use ``log``, ``arg``, ``loop`` and ``checkpointing``; the ``flor``
command replays historical versions to fill in values that were never
logged. ``dataframe`` returns every run, recorded or backfilled, as one
pivoted table.
"""

from .errors import FlorError
from .instrument import arg, checkpointing, log, loop

__all__ = ["arg", "checkpointing", "dataframe", "log", "loop", "FlorError"]
__version__ = "0.1.0"


def dataframe(*names: str, where: str | None = None):
    """Pivoted view of ``names`` for the project around the current directory."""
    # imported lazily so instrumented scripts never pay for pandas
    from . import views
    from .logstore import Database
    from .project import discover

    project = discover()
    with Database(project.db_path) as db:
        df = views.dataframe(db, *names, projid=project.projid)
    return views.filter_view(df, where)
