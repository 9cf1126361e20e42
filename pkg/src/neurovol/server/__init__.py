from .app import ServerConfig, ServiceHandle, create_app, run_blocking, serve

__all__ = ["ServerConfig", "ServiceHandle", "create_app", "run_blocking", "serve"]
