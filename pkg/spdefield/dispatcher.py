"""Command routing.

Handler modules own a `router = Router()` and register coroutines with
`@router.command("name")`; main includes the routers into a Dispatcher, which
runs the selected command and turns failures into exit codes.
"""

import logging
from typing import Awaitable, Callable

from spdefield.config import CampaignConfig
from spdefield.errors import OutputError, SpdeFieldError

log = logging.getLogger(__name__)

Handler = Callable[[CampaignConfig], Awaitable[int | None]]


class Router:
    def __init__(self, name: str | None = None):
        self.name = name
        self.handlers: dict[str, Handler] = {}

    def command(self, name: str) -> Callable[[Handler], Handler]:
        def register(handler: Handler) -> Handler:
            if name in self.handlers:
                raise ValueError(f"command {name!r} registered twice")
            self.handlers[name] = handler
            return handler

        return register


class Dispatcher:
    def __init__(self):
        self.handlers: dict[str, Handler] = {}

    def include_router(self, router: Router) -> None:
        for name, handler in router.handlers.items():
            if name in self.handlers:
                raise ValueError(f"command {name!r} provided by two routers")
            self.handlers[name] = handler

    @property
    def commands(self) -> list[str]:
        return sorted(self.handlers)

    async def dispatch(self, config: CampaignConfig) -> int:
        handler = self.handlers.get(config.command)
        if handler is None:
            log.error("unknown command %r (known: %s)", config.command, ", ".join(self.commands))
            return 2
        try:
            code = await handler(config)
        except SpdeFieldError as e:
            log.error("%s: %s", type(e).__name__, e)
            return e.exit_code
        except OSError as e:
            log.error("%s", OutputError(f"I/O failure: {e}"))
            return OutputError.exit_code
        except Exception:
            log.exception("unexpected failure in %s", config.command)
            return 1
        return 0 if code is None else code
