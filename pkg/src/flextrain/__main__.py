from flextrain.cli import main

main()
