"""Entry point for the kvsim CLI application."""

from kvsim.cli import app

if __name__ == "__main__":
    app()
