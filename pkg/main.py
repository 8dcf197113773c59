#!/usr/bin/env python3
"""
Main entry point
"""
import asyncio
import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(asyncio.run(main()))
