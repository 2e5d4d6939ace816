from fedssd.cli import main
import sys
sys.exit(main())
