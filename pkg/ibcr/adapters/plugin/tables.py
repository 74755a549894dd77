"""Virtual/real id maps and the directory of ids published by peers."""

import struct
from collections.abc import Iterator
from dataclasses import dataclass
from dataclasses import field
from typing import Any

from ibcr.domain.errors import VirtualIdConflict
from ibcr.domain.models import IdClass
from ibcr.domain.models import Namespace
from ibcr.domain.models import ResourceKind
from ibcr.domain.state import DirectoryState
from ibcr.domain.state import IdKey


U32 = struct.Struct("<I")
U64 = struct.Struct("<Q")
RKEY_KEY = struct.Struct("<IQ")


class BiMap:
    """Bijective map for one id class."""

    def __init__(self, id_class: IdClass):
        self.id_class = id_class
        self._forward: dict[IdKey, IdKey] = {}
        self._backward: dict[IdKey, IdKey] = {}

    def __len__(self) -> int:
        return len(self._forward)

    def __contains__(self, virtual: IdKey) -> bool:
        return virtual in self._forward

    def items(self) -> Iterator[tuple[IdKey, IdKey]]:
        return iter(self._forward.items())

    def real(self, virtual: IdKey) -> IdKey | None:
        return self._forward.get(virtual)

    def virtual(self, real: IdKey) -> IdKey | None:
        return self._backward.get(real)

    def has_real(self, real: IdKey) -> bool:
        return real in self._backward

    def add(self, virtual: IdKey, real: IdKey) -> None:
        if self._forward.get(virtual, real) != real:
            raise VirtualIdConflict(f"{self.id_class} virtual id {virtual} already maps to {self._forward[virtual]}")
        if self._backward.get(real, virtual) != virtual:
            raise VirtualIdConflict(f"{self.id_class} real id {real} already claimed by {self._backward[real]}")
        self._forward[virtual] = real
        self._backward[real] = virtual

    def rebind(self, virtual: IdKey, real: IdKey) -> None:
        """Point an existing virtual id at a fresh real id."""
        old = self._forward.pop(virtual, None)
        if old is not None and self._backward.get(old) == virtual:
            del self._backward[old]
        self.add(virtual, real)

    def discard(self, virtual: IdKey) -> None:
        real = self._forward.pop(virtual, None)
        if real is not None and self._backward.get(real) == virtual:
            del self._backward[real]

    def max_virtual(self) -> int:
        values = [v[1] if isinstance(v, tuple) else v for v in self._forward]
        return max(values, default=0)


class TranslationTable:
    def __init__(self):
        self.maps = {id_class: BiMap(id_class) for id_class in IdClass}

    def __getitem__(self, id_class: IdClass) -> BiMap:
        return self.maps[id_class]

    def handles(self, kind: ResourceKind) -> BiMap:
        return self.maps[IdClass(kind.value)]

    def virtualize(self, real: int) -> int | None:
        """Reverse lookup of a bare real id across every int-keyed class."""
        for id_class, bimap in self.maps.items():
            if id_class in (IdClass.RKEY, IdClass.PD_UID):
                continue
            virtual = bimap.virtual(real)
            if virtual is not None:
                return virtual
        for (_, vrkey), (_, rkey) in self.maps[IdClass.RKEY].items():
            if rkey == real:
                return vrkey
        return None

    def to_state(self) -> dict[str, list[tuple[IdKey, IdKey]]]:
        return {str(id_class): list(bimap.items()) for id_class, bimap in self.maps.items() if len(bimap)}

    @classmethod
    def from_state(cls, state: dict[str, list[tuple[IdKey, IdKey]]]) -> "TranslationTable":
        table = cls()
        for name, pairs in state.items():
            bimap = table.maps[IdClass(name)]
            for virtual, real in pairs:
                bimap.add(_key(virtual), _key(real))
        return table


def _key(value: Any) -> IdKey:
    return tuple(value) if isinstance(value, list | tuple) else value


@dataclass
class RkeyDirectory:
    """What this process knows about ids published by every process."""

    qp_pd: dict[int, int] = field(default_factory=dict)
    rkeys: dict[tuple[int, int], int] = field(default_factory=dict)
    lids: dict[int, int] = field(default_factory=dict)
    qp_real: dict[int, int] = field(default_factory=dict)

    def load(self, namespace: Namespace, entries: dict[bytes, bytes]) -> int:
        for key, value in entries.items():
            match namespace:
                case Namespace.QP_PD:
                    self.qp_pd[U32.unpack(key)[0]] = U64.unpack(value)[0]
                case Namespace.VRKEY_PD_RKEY:
                    vrkey, pd_uid = RKEY_KEY.unpack(key)
                    self.rkeys[(vrkey, pd_uid)] = U32.unpack(value)[0]
                case Namespace.LID:
                    self.lids[U32.unpack(key)[0]] = U32.unpack(value)[0]
                case Namespace.QP_REAL:
                    self.qp_real[U32.unpack(key)[0]] = U32.unpack(value)[0]
        return len(entries)

    def max_virtual(self, id_class: IdClass) -> int:
        match id_class:
            case IdClass.QP_NUM:
                return max(self.qp_real, default=0)
            case IdClass.LID:
                return max(self.lids, default=0)
            case IdClass.RKEY:
                return max((vrkey for vrkey, _ in self.rkeys), default=0)
        return 0

    def __len__(self) -> int:
        return len(self.qp_pd) + len(self.rkeys) + len(self.lids) + len(self.qp_real)

    def to_state(self) -> DirectoryState:
        return DirectoryState(
            qp_pd=sorted(self.qp_pd.items()),
            rkeys=sorted((vrkey, pd, rkey) for (vrkey, pd), rkey in self.rkeys.items()),
            lids=sorted(self.lids.items()),
            qp_real=sorted(self.qp_real.items()),
        )

    @classmethod
    def from_state(cls, state: DirectoryState) -> "RkeyDirectory":
        return cls(
            qp_pd=dict(state.qp_pd),
            rkeys={(vrkey, pd): rkey for vrkey, pd, rkey in state.rkeys},
            lids=dict(state.lids),
            qp_real=dict(state.qp_real),
        )
