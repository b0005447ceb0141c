#!/usr/bin/env python3
"""Startup script for the run browser"""
import sys

import uvicorn

from config import settings


def main():
    print(f"🚀 Starting run browser on {settings.host}:{settings.port} (runs in {settings.runs_dir})...")

    try:
        uvicorn.run("main:app", host=settings.host, port=settings.port, log_level=settings.log_level.lower())
    except KeyboardInterrupt:
        print("\n👋 Shutting down run browser...")
    except Exception as e:
        print(f"❌ Failed to start: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
