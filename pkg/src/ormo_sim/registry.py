from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Generic, TypeVar

from .exceptions import SimRegistryError

T = TypeVar(name="T")


@dataclass
class RegistrationMetadata(Generic[T]):
    """Metadata for a registered product."""

    factory: Callable[..., T]
    description: str = ""
    tags: dict[str, object] = field(default_factory=dict)


class Registry(Generic[T]):
    """
    Named factory registry.
    Products (server rules, gradient oracles) are resolved by the name a
    configuration file carries.
    """

    def __init__(self, kind: str) -> None:
        self.kind: str = kind
        self._registry: dict[str, RegistrationMetadata[T]] = {}

    # ----------------------------------------------------------------------------------
    #   Registering
    # ----------------------------------------------------------------------------------

    def register(
        self,
        name: str,
        /,
        factory: Callable[..., T],
        description: str = "",
        replace: bool = False,
        **tags: object,
    ) -> None:
        """
        Register a factory under `name`.

        Raises:
            * `SimRegistryError`: If `name` is already taken and `replace` is false
        """

        if (name in self) and (not replace):
            raise SimRegistryError(
                f"The {self.kind} `{name}` is already registered",
                service=self.__class__.__name__,
                category="USAGE",
            )

        self._registry[name] = RegistrationMetadata[T](
            factory=factory, description=description, tags=dict(tags)
        )

    def provides(
        self, name: str, /, description: str = "", **tags: object
    ) -> Callable[[Callable[..., T]], Callable[..., T]]:
        """Decorator form of `register`."""

        def decorator(factory: Callable[..., T]) -> Callable[..., T]:
            self.register(name, factory=factory, description=description, **tags)
            return factory

        return decorator

    # ----------------------------------------------------------------------------------
    #   Resolving
    # ----------------------------------------------------------------------------------

    def resolve(self, name: str, /, *args: object, **kwargs: object) -> T:
        """
        Build the product registered as `name`.

        Raises:
            * `SimRegistryError`: If `name` is not registered
        """

        return self.metadata(name).factory(*args, **kwargs)

    def metadata(self, name: str, /) -> RegistrationMetadata[T]:
        """
        Get the registration of `name`.

        Raises:
            * `SimRegistryError`: If `name` is not registered
        """

        if name not in self:
            known: str = ", ".join(f"`{n}`" for n in self.names())
            raise SimRegistryError(
                f"The {self.kind} `{name}` is not registered (known: {known})",
                service=self.__class__.__name__,
                context={"kind": self.kind, "name": name},
            )
        return self._registry[name]

    def tag(self, name: str, key: str, /, default: object = None) -> object:
        """Get one tag of a registration, or `default` if it was never set."""

        return self.metadata(name).tags.get(key, default)

    def names(self) -> tuple[str, ...]:
        return tuple(self._registry)

    def __contains__(self, name: object) -> bool:
        return name in self._registry
