from detlimit.cli import main

main()
