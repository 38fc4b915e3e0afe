"""Resource-aware FCFS batch middleware: master, agents, CLI, simulator."""

__version__ = "0.1.0"
