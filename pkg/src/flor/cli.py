"""``flor`` command line: replay, dataframe, versions, stat.

Exit codes: 0 success, 1 declined or nothing to do, 2 usage or error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import FlorError, UnknownColumn
from .project import discover

EXIT_OK, EXIT_EMPTY, EXIT_ERROR = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_ERROR)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flor", description="Hindsight logging: query and backfill experiment history.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("replay", help="backfill VARS for the runs matching a where clause")
    r.add_argument("vars", metavar="VARS", help="comma-separated names to generate")
    r.add_argument("where", nargs="?", default="", help="where clause over the dataframe columns")
    r.add_argument("--workers", type=int, default=1, help="versions replayed concurrently")
    r.add_argument("--partitions", type=int, default=1, help="processes per range scan")
    r.add_argument("-y", "--yes", action="store_true", help="skip the confirmation prompt")
    r.add_argument("--dry-run", action="store_true", help="print the plan and stop")

    d = sub.add_parser("dataframe", help="print the pivoted view of NAMES")
    d.add_argument("names", nargs="+", metavar="NAME")
    d.add_argument("--where", default="", help="where clause")
    d.add_argument("--csv", metavar="PATH", help="write CSV to PATH ('-' for stdout)")

    v = sub.add_parser("versions", help="list recorded versions")
    v.add_argument("where", nargs="?", default="", help="where clause over projid, tstamp, filename, vid")

    s = sub.add_parser("stat", help="profile and cost estimates of one run")
    s.add_argument("vid", help="version id or tstamp prefix")
    return p


def _confirm(prompt: str) -> bool:
    print(prompt, end=" ", flush=True)
    try:
        answer = sys.stdin.readline()
    except (OSError, KeyboardInterrupt):
        return False
    return answer.strip().lower() in ("y", "yes")


def cmd_replay(args) -> int:
    from . import executor, planner

    if args.workers < 1 or args.partitions < 1:
        print("flor: --workers and --partitions must be at least 1", file=sys.stderr)
        return EXIT_ERROR
    project = discover()
    query = planner.ReplayQuery(args.vars.split(","), args.where or None)
    plan = planner.plan(project, query, partitions=args.partitions)
    if not plan.tasks:
        for vid, tstamp, why in plan.excluded:
            print(f"{vid[:8]}  {tstamp}  excluded: {why}")
        print("nothing to backfill")
        return EXIT_EMPTY
    print(plan.render(args.workers))
    if args.dry_run:
        return EXIT_OK
    if not args.yes and not _confirm("Continue? [y/N]"):
        print("aborted")
        return EXIT_EMPTY
    plan.confirmed = True
    report = executor.execute(project, plan, workers=args.workers)
    print(report.render())
    return EXIT_OK if report.ok else EXIT_ERROR


def cmd_dataframe(args) -> int:
    from . import views
    from .logstore import Database

    project = discover()
    with Database(project.db_path) as db:
        df = views.dataframe(db, *args.names, projid=project.projid)
    df = views.filter_view(df, args.where)
    if args.csv:
        views.to_csv(df, sys.stdout if args.csv == "-" else args.csv)
        return EXIT_OK
    if df.empty:
        print("  ".join(df.columns))
    else:
        print(df.to_string(index=False, na_rep=""))
    return EXIT_OK


def cmd_versions(args) -> int:
    from . import vcs
    from .logstore import Database

    project = discover()
    with Database(project.db_path) as db:
        recs = vcs.versions(db, project.projid, args.where)
    for r in recs:
        print(f"{r.vid[:8]}  {r.ts_start}  {r.ts_end or '-':19}  {r.branch}  {r.filename or '-'}")
    return EXIT_OK


def cmd_stat(args) -> int:
    from . import planner, vcs
    from .ckptstore import CheckpointStore
    from .logstore import Database
    from .scan import PREFIX, RANGE, SUFFIX, VALIDATION, ScanLevel

    project = discover()
    with Database(project.db_path) as db:
        cands = vcs.resolve_prefix(db, project.projid, args.vid)
        if not cands:
            print(f"flor: no version matches {args.vid!r}", file=sys.stderr)
            return EXIT_ERROR
        if len(cands) > 1:
            print(f"flor: {args.vid!r} is ambiguous:", file=sys.stderr)
            for c in cands:
                print(f"  {c.vid[:8]}  {c.ts_start}", file=sys.stderr)
            return EXIT_ERROR
        rec = cands[0]
        prof = planner.load_profile(db, project.projid, rec.ts_start, CheckpointStore.local(project.obj_dir, True))
    model = planner.CostModel(prof, planner.calibration_factor(project))
    print(f"vid        {rec.vid}")
    print(f"tstamp     {prof.tstamp}")
    print(f"filename   {prof.filename}")
    print(f"t_prefix   {prof.t_prefix:.3f}")
    for k in sorted(prof.t_iter):
        extra = []
        if k in prof.t_save:
            extra.append(f"save {prof.t_save[k]:.3f}")
        if k in prof.t_load:
            extra.append(f"load {prof.t_load[k]:.3f}")
        tail = f"  ({', '.join(extra)})" if extra else ""
        print(f"t_{prof.main_loop}[{k}]  {prof.t_iter[k]:.3f}{tail}")
    print(f"t_suffix   {prof.t_suffix:.3f}")
    print(f"checkpoints {prof.checkpoints}")
    scans = [ScanLevel(PREFIX), ScanLevel(SUFFIX), ScanLevel(VALIDATION)]
    if prof.n_iter:
        scans.append(ScanLevel(RANGE, 0, prof.n_iter))
    for s in scans:
        print(f"estimate {str(s):12} {model.estimate(s):.3f}")
    return EXIT_OK


COMMANDS = {"replay": cmd_replay, "dataframe": cmd_dataframe, "versions": cmd_versions, "stat": cmd_stat}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UnknownColumn as e:
        print(f"flor: {e}", file=sys.stderr)
        return EXIT_ERROR
    except FlorError as e:
        print(f"flor: {e}", file=sys.stderr)
        return EXIT_ERROR
    except BrokenPipeError:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
