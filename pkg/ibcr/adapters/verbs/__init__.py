from ibcr.adapters.verbs.engine import VerbsEngine
from ibcr.adapters.verbs.engine import epoch_tag
from ibcr.adapters.verbs.resources import DispatchTable


__all__ = ["DispatchTable", "VerbsEngine", "epoch_tag"]
