"""Named, ordered collections of parameter tensors with value semantics.

A ParamSet is the unit that flows through training: the meta-learned
initialization, per-style adapted weights, and interpolated blends are all
ParamSets. Operations on ParamSets never mutate their inputs; they build new
collections.
"""

import hashlib

import torch


class ParamSet:
    """Ordered map of name -> tensor, hashed by its (name, shape) schema.

    Entries may carry autograd graphs (the inner loop of meta-training relies
    on that), so cloning here preserves grad history; use ``detached()`` to
    drop it.
    """

    __slots__ = ("_entries",)

    def __init__(self, entries):
        self._entries = {}
        for name, value in dict(entries).items():
            if not isinstance(value, torch.Tensor):
                raise TypeError(f"entry {name!r} is not a tensor: {type(value).__name__}")
            self._entries[name] = value

    @property
    def entries(self):
        return self._entries

    @property
    def names(self):
        return list(self._entries)

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    @property
    def schema(self):
        return tuple((name, tuple(t.shape)) for name, t in self._entries.items())

    @property
    def schema_hash(self):
        text = ";".join(f"{name}:{'x'.join(map(str, shape))}" for name, shape in self.schema)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def clone(self):
        return ParamSet({name: t.clone() for name, t in self._entries.items()})

    def detached(self):
        return ParamSet({name: t.detach().clone() for name, t in self._entries.items()})

    def astype(self, dtype):
        return ParamSet({name: t.detach().clone().to(dtype) for name, t in self._entries.items()})

    def equal(self, other):
        """Bit-equality: same names in the same order, identical values."""
        if self.names != other.names:
            return False
        return all(torch.equal(self._entries[n], other._entries[n]) for n in self._entries)

    def all_finite(self):
        return all(torch.isfinite(t).all() for t in self._entries.values())

    def param_count(self):
        return sum(t.numel() for t in self._entries.values())

    def __repr__(self):
        return f"ParamSet({len(self)} entries, {self.param_count()} scalars)"
