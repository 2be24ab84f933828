"""Branch-and-merge coordination of parallel coding agents.

A manager decomposes a repository into dependency-ordered work units, hands
them to engineers that each edit an isolated git worktree, and integrates
their verified commits into a single main branch one merge at a time.
"""

__version__ = "0.1.0"
