"""HTTP facade over the search pipeline.

The service owns a root directory (projects, datasets, job registry) and
exposes the pipeline's entry points as endpoints; it never reimplements
orchestration logic. The CLI remains the direct, in-process way to run
searches; this wrapper exists for callers that want to submit work over
HTTP and poll for results.
"""

from .app import create_app

__all__ = ["create_app"]
