from atmseg.cli import main

main()
