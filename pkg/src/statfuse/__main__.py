from statfuse.cli import main

main()
