from fdlora.cli import main

main()
