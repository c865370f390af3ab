"""Main entry point for flow-monitor."""

if __name__ == "__main__":
    from flow_monitor.cli import main

    main()
