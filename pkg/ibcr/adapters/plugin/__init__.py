from ibcr.adapters.plugin.plugin import CrPlugin
from ibcr.adapters.plugin.plugin import ShadowDescriptor
from ibcr.adapters.plugin.plugin import unresolved_pairs


__all__ = ["CrPlugin", "ShadowDescriptor", "unresolved_pairs"]
