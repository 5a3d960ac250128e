from vvstream.cli import main

main()
