"""Data-path entry points.

These mirror the inline functions of a verbs library: they hold no logic of
their own and jump through the dispatch table of the handle's context, so
whatever layer is bound there sees every post and poll.
"""

from ibcr.adapters.verbs.resources import SLOTS
from ibcr.domain.models import CompletionEvent
from ibcr.domain.models import WorkRequest


def post_send(qp, wr: WorkRequest) -> None:
    qp.dispatch.post_send(qp, wr)


def post_recv(qp, wr: WorkRequest) -> None:
    qp.dispatch.post_recv(qp, wr)


def post_srq_recv(srq, wr: WorkRequest) -> None:
    srq.dispatch.post_srq_recv(srq, wr)


def poll_cq(cq, max_entries: int) -> list[CompletionEvent]:
    return cq.dispatch.poll_cq(cq, max_entries)


def install_identity_wrappers(ctx, layer: str = "identity") -> dict:
    """Bind pass-through wrappers on every slot of ``ctx``'s dispatch table."""
    previous: dict = {}

    def through(name):
        def wrapper(*args):
            return previous[name](*args)

        wrapper.__name__ = f"identity_{name}"
        return wrapper

    previous.update(ctx.dispatch.rebind(layer, **{name: through(name) for name in SLOTS}))
    return previous
