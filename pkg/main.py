#!/usr/bin/env python3
"""
iscapbeam - OFDM sensing, communication and powering beamforming.
Main entry point for the application.
"""

from iscapbeam.cli import cli

if __name__ == '__main__':
    cli()
