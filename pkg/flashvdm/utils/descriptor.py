"""
Module contains typed descriptor templates used by every config
object of the package: integers, floats, flags, strings and their
range-checked variants (positive counts, fractions, choices)

The descriptors store the value on the owning instance (under a
private name), so config objects of the same class do not share
state. They can be used as dataclass field defaults: dataclasses
ask the descriptor for its default through `__get__(None, owner)`
and run every assignment (including the generated `__init__`)
through `__set__`, so validation happens on construction too

One can inherit from the templates in order to perform more
specific checks on values (see `Bounded`)
"""

from typing import Any, Iterable, Optional, Tuple


def typed_descriptor(expected_type: type, accepted: Tuple[type, ...] = ()):
    """
    Create typed descriptor template for a given type

    Args:

    + `expected_type`: class to ensure the instances of
    + `accepted`: extra classes converted into `expected_type` on
    assignment (e.g. `int` for a float field)
    """
    if type(expected_type) is not type:
        raise TypeError(f"Expected a class, got {type(expected_type)}")

    def make_type_hint(expected_type):
        # bool is an int subclass, but a flag is never a count
        def hint(_, value):
            if isinstance(value, bool) and expected_type is not bool:
                raise TypeError(
                    f"Invalid type: expected {expected_type}, got {type(value)}"
                )
            if isinstance(value, (expected_type, *accepted)):
                return
            raise TypeError(
                f"Invalid type: expected {expected_type}, got {type(value)}"
            )

        return hint

    class Descriptor:
        """
        Descriptor class is a thin wrapper over the instance value,
        ensuring the type inside `__set__`/`__init__` call

        Note that for more complicated descriptors,
        one should also override `_check` and validate the inputs
        """

        _type_hint = make_type_hint(expected_type)

        def __init__(self, default_value=expected_type()) -> None:
            self.name = None
            self._type_hint(default_value)
            default_value = expected_type(default_value)
            self._check(default_value)
            self.default = default_value

        def __set_name__(self, owner, name):
            self.name = name
            self.private = f"_{name}"

        def _check(self, value) -> None:
            return

        def __get__(self, obj, type=None):
            if obj is None:
                return self.default
            return getattr(obj, self.private, self.default)

        def __set__(self, obj, newvalue):
            self._type_hint(newvalue)
            newvalue = expected_type(newvalue)
            self._check(newvalue)
            setattr(obj, self.private, newvalue)

    return Descriptor


class String(typed_descriptor(str)):
    """
    String descriptor
    """


class Integer(typed_descriptor(int)):
    """
    Integer descriptor
    """


class Float(typed_descriptor(float, accepted=(int,))):
    """
    Float descriptor, integers are converted on assignment
    """


class Flag(typed_descriptor(bool)):
    """
    Boolean descriptor
    """


class Bounded:
    """
    Mixin for numeric descriptors with an allowed range

    `low`/`high` are inclusive unless `open_low`/`open_high` is set
    """

    def __init__(
        self,
        default_value=0,
        low: Optional[float] = None,
        high: Optional[float] = None,
        open_low: bool = False,
        open_high: bool = False,
    ) -> None:
        self.low, self.high = low, high
        self.open_low, self.open_high = open_low, open_high
        super().__init__(default_value)

    def _check(self, value) -> None:
        too_low = self.low is not None and (
            value <= self.low if self.open_low else value < self.low
        )
        too_high = self.high is not None and (
            value >= self.high if self.open_high else value > self.high
        )
        if too_low or too_high:
            left = "(" if self.open_low else "["
            right = ")" if self.open_high else "]"
            raise ValueError(
                f"{self.name or 'value'} must lie in "
                f"{left}{self.low}, {self.high}{right}, got {value}"
            )


class BoundedInteger(Bounded, Integer):
    """
    Integer descriptor with a range
    """


class BoundedFloat(Bounded, Float):
    """
    Float descriptor with a range
    """


class PositiveInteger(BoundedInteger):
    """
    Positive integer descriptor (counts, resolutions)
    """

    def __init__(self, default_value=1) -> None:
        super().__init__(default_value, low=1)


class NonNegativeInteger(BoundedInteger):
    """
    Non-negative integer descriptor (radii, optional counts)
    """

    def __init__(self, default_value=0) -> None:
        super().__init__(default_value, low=0)


class PositiveFloat(BoundedFloat):
    """
    Strictly positive float descriptor (temperatures, scales)
    """

    def __init__(self, default_value=1.0) -> None:
        super().__init__(default_value, low=0.0, open_low=True)


class Fraction(BoundedFloat):
    """
    Float in the closed unit interval
    """

    def __init__(self, default_value=0.0) -> None:
        super().__init__(default_value, low=0.0, high=1.0)


class Choice(String):
    """
    String descriptor restricted to a fixed set of options
    """

    def __init__(self, default_value: str, options: Iterable[str]) -> None:
        self.options = tuple(options)
        super().__init__(default_value)

    def _check(self, value: Any) -> None:
        if value in self.options:
            return
        raise ValueError(
            f"{self.name or 'value'} must be one of {self.options}, got {value!r}"
        )
